//! Depth rasters, clips and camera records shared by every other module.
//!
//! Rasters are row-major with row 0 at the top. A pixel is addressed as
//! `(row, col)` and stored at `row * width + col`.

use std::fmt::Debug;
use std::marker::PhantomData;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value semantics of a depth raster.
pub trait Domain: Copy + Clone + Debug + Default + PartialEq + Send + Sync + 'static {
    /// Domain byte used by the VDR1 header.
    const FLAG: u8;
    const NAME: &'static str;

    fn check(value: f64) -> bool;
}

/// Affine-invariant inverse depth (unitless).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Inverse;

/// Metric depth in meters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Metric;

impl Domain for Inverse {
    const FLAG: u8 = 1;
    const NAME: &'static str = "inverse";

    fn check(value: f64) -> bool {
        value.is_finite()
    }
}

impl Domain for Metric {
    const FLAG: u8 = 0;
    const NAME: &'static str = "metric";

    fn check(value: f64) -> bool {
        value.is_finite() && value > 0.0
    }
}

/// A single depth raster with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame<D: Domain> {
    width: usize,
    height: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    _domain: PhantomData<D>,
}

pub type InvDepthFrame = Frame<Inverse>;
pub type MetricDepthFrame = Frame<Metric>;

impl<D: Domain> Frame<D> {
    /// Builds a frame, checking dimensions and the domain invariant at every
    /// valid pixel.
    pub fn new(width: usize, height: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if width == 0 || height == 0 {
            return Err(Error::shape("frame dimensions must be non-zero"));
        }
        if values.len() != n || mask.len() != n {
            return Err(Error::shape(format!(
                "{width}x{height} frame needs {n} values and mask entries, got {} and {}",
                values.len(),
                mask.len()
            )));
        }
        if let Some(i) = (0..n).find(|&i| mask[i] && !D::check(values[i])) {
            return Err(Error::InvalidValue(format!("{} value {} at valid pixel {i}", D::NAME, values[i])));
        }
        Ok(Self {
            width,
            height,
            values,
            mask,
            _domain: PhantomData,
        })
    }

    /// Frame with every pixel valid.
    pub fn dense(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(width, height, values, vec![true; n])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let values = (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        Self::dense(width, height, values)
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::dense(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.index(row, col)]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.mask[self.index(row, col)]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn into_parts(self) -> (usize, usize, Vec<f64>, Vec<bool>) {
        (self.width, self.height, self.values, self.mask)
    }

    /// Maps every valid value; invalid pixels keep their stored value.
    pub fn map_valid(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = self
            .values
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| if m { f(v) } else { v })
            .collect();
        Self::new(self.width, self.height, values, self.mask.clone())
    }

    /// Same frame with some pixels additionally invalidated.
    pub fn restrict(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.len() {
            return Err(Error::shape("restriction mask size differs from frame"));
        }
        let mask = self.mask.iter().zip(keep).map(|(&a, &b)| a && b).collect();
        Self::new(self.width, self.height, self.values.clone(), mask)
    }

    /// Column `col` of the frame, top to bottom.
    pub fn column(&self, col: usize) -> Vec<(f64, bool)> {
        (0..self.height)
            .map(|r| {
                let i = self.index(r, col);
                (self.values[i], self.mask[i])
            })
            .collect()
    }
}

/// Ordered frames with their global timeline indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip<D: Domain> {
    frames: Vec<Frame<D>>,
    timeline: Vec<usize>,
}

pub type VideoDepthClip<D> = Clip<D>;
pub type InvClip = Clip<Inverse>;
pub type MetricClip = Clip<Metric>;

impl<D: Domain> Clip<D> {
    pub fn new(frames: Vec<Frame<D>>, timeline: Vec<usize>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::shape("a clip needs at least one frame"));
        }
        if frames.len() != timeline.len() {
            return Err(Error::shape(format!(
                "{} frames but {} timeline entries",
                frames.len(),
                timeline.len()
            )));
        }
        let dims = frames[0].dims();
        if frames.iter().any(|f| f.dims() != dims) {
            return Err(Error::shape("clip frames differ in dimensions"));
        }
        if timeline.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::shape("clip timeline must be strictly increasing"));
        }
        Ok(Self { frames, timeline })
    }

    /// Clip with timeline `0..frames.len()`.
    pub fn from_frames(frames: Vec<Frame<D>>) -> Result<Self> {
        let timeline = (0..frames.len()).collect();
        Self::new(frames, timeline)
    }

    pub fn frames(&self) -> &[Frame<D>] {
        &self.frames
    }

    pub fn timeline(&self) -> &[usize] {
        &self.timeline
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    pub fn into_frames(self) -> Vec<Frame<D>> {
        self.frames
    }

    pub fn into_parts(self) -> (Vec<Frame<D>>, Vec<usize>) {
        (self.frames, self.timeline)
    }

    pub fn map_frames<E: Domain>(&self, f: impl Fn(&Frame<D>) -> Result<Frame<E>>) -> Result<Clip<E>> {
        let frames = self.frames.iter().map(f).collect::<Result<Vec<_>>>()?;
        Clip::new(frames, self.timeline.clone())
    }

    /// Sub-clip holding the frames at the given positions (not timeline
    /// indices), which must be increasing.
    pub fn select(&self, positions: &[usize]) -> Result<Self> {
        let frames = positions.iter().map(|&p| self.frames[p].clone()).collect();
        let timeline = positions.iter().map(|&p| self.timeline[p]).collect();
        Self::new(frames, timeline)
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::config(format!("focal lengths must be positive, got fx={fx} fy={fy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Intrinsics with a principal point at the image center and the given
    /// horizontal field of view.
    pub fn centered(width: usize, height: usize, hfov_rad: f64) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * hfov_rad).tan();
        Self::new(f, f, 0.5 * (width as f64 - 1.0), 0.5 * (height as f64 - 1.0))
    }

    /// Camera-frame point at depth `z` seen through pixel `(u, v)` = (col, row).
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z)
    }

    /// Pixel `(u, v)` of a camera-frame point; `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        (p.z > 0.0).then(|| (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

/// Rigid camera-to-world transform. Camera axes: x right, y down, z forward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidValue(format!(
                "rotation not orthonormal (|RᵀR − I| = {ortho:e}, det = {det})"
            )));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Transform taking points in this camera's frame into `target`'s frame.
    pub fn relative_to(&self, target: &Pose) -> Pose {
        target.inverse().compose(self)
    }

    /// 3×4 row-major `[R | t]`.
    pub fn to_rows(&self) -> [[f64; 4]; 3] {
        let mut rows = [[0.0; 4]; 3];
        for (r, row) in rows.iter_mut().enumerate() {
            for c in 0..3 {
                row[c] = self.rotation[(r, c)];
            }
            row[3] = self.translation[r];
        }
        rows
    }

    pub fn from_rows(rows: &[[f64; 4]; 3]) -> Result<Self> {
        let rotation = Matrix3::from_fn(|r, c| rows[r][c]);
        let translation = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
        Self::new(rotation, translation)
    }
}

/// `value ↦ scale · value + shift`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub scale: f64,
    pub shift: f64,
}

impl AffineMap {
    pub const IDENTITY: AffineMap = AffineMap { scale: 1.0, shift: 0.0 };

    pub fn new(scale: f64, shift: f64) -> Self {
        Self { scale, shift }
    }

    pub fn apply(&self, v: f64) -> f64 {
        self.scale * v + self.shift
    }

    pub fn inverse(&self) -> Self {
        Self {
            scale: 1.0 / self.scale,
            shift: -self.shift / self.scale,
        }
    }
}

impl Default for AffineMap {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Per-pixel displacement `(du, dv)` from frame k to frame k+1, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub vectors: Vec<[f64; 2]>,
    pub mask: Vec<bool>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, vectors: Vec<[f64; 2]>, mask: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if vectors.len() != n || mask.len() != n {
            return Err(Error::shape(format!("{width}x{height} flow needs {n} vectors")));
        }
        Ok(Self {
            width,
            height,
            vectors,
            mask,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            vectors: vec![[0.0; 2]; n],
            mask: vec![true; n],
        }
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Valid pixels become `1 / max(depth, eps)`; the mask is unchanged.
pub fn depth_to_inverse(frame: &MetricDepthFrame, eps: f64) -> Result<InvDepthFrame> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidValue(format!("eps must be positive, got {eps}")));
    }
    let values = frame
        .values
        .iter()
        .zip(&frame.mask)
        .map(|(&d, &m)| if m { 1.0 / d.max(eps) } else { 0.0 })
        .collect();
    Frame::new(frame.width, frame.height, values, frame.mask.clone())
}

/// Valid pixels become `1 / max(value, eps)`. Values `<= 0` have no metric
/// meaning and are invalidated instead of clamped.
pub fn inverse_to_depth(frame: &InvDepthFrame, eps: f64) -> Result<MetricDepthFrame> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidValue(format!("eps must be positive, got {eps}")));
    }
    let mut values = Vec::with_capacity(frame.len());
    let mut mask = Vec::with_capacity(frame.len());
    for (&v, &m) in frame.values.iter().zip(&frame.mask) {
        let keep = m && v > 0.0;
        mask.push(keep);
        values.push(if keep { 1.0 / v.max(eps) } else { 0.0 });
    }
    Frame::new(frame.width, frame.height, values, mask)
}

pub fn clip_to_inverse(clip: &MetricClip, eps: f64) -> Result<InvClip> {
    clip.map_frames(|f| depth_to_inverse(f, eps))
}

pub fn clip_to_depth(clip: &InvClip, eps: f64) -> Result<MetricClip> {
    clip.map_frames(|f| inverse_to_depth(f, eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reciprocal_conversions() {
        let d = MetricDepthFrame::dense(1, 1, vec![2.0]).unwrap();
        assert_eq!(depth_to_inverse(&d, 1e-6).unwrap().values()[0], 0.5);
        let i = InvDepthFrame::dense(1, 1, vec![0.5]).unwrap();
        assert_eq!(inverse_to_depth(&i, 1e-6).unwrap().values()[0], 2.0);
    }

    #[test]
    fn zero_depth_clamps_to_eps() {
        // Metric frames reject 0 at valid pixels, so go through an inverse
        // frame with the same raw layout.
        let raw = Frame::<Metric> {
            width: 1,
            height: 1,
            values: vec![0.0],
            mask: vec![true],
            _domain: PhantomData,
        };
        let inv = depth_to_inverse(&raw, 1e-3).unwrap();
        assert!((inv.values()[0] - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_pixels_stay_invalid() {
        let d = MetricDepthFrame::new(2, 1, vec![2.0, -1.0], vec![true, false]).unwrap();
        let inv = depth_to_inverse(&d, 1e-6).unwrap();
        assert_eq!(inv.mask(), &[true, false]);
        let back = inverse_to_depth(&inv, 1e-6).unwrap();
        assert_eq!(back.mask(), &[true, false]);
    }

    #[test]
    fn negative_inverse_is_invalidated() {
        let i = InvDepthFrame::dense(2, 1, vec![-0.2, 0.25]).unwrap();
        let d = inverse_to_depth(&i, 1e-6).unwrap();
        assert_eq!(d.mask(), &[false, true]);
        assert_eq!(d.values()[1], 4.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(MetricDepthFrame::dense(1, 1, vec![-1.0]).is_err());
        assert!(InvDepthFrame::dense(1, 1, vec![f64::NAN]).is_err());
        assert!(InvDepthFrame::dense(2, 2, vec![1.0]).is_err());
        let f = InvDepthFrame::constant(2, 2, 1.0).unwrap();
        assert!(Clip::new(vec![f.clone(), f.clone()], vec![3, 3]).is_err());
        assert!(Clip::<Inverse>::new(vec![], vec![]).is_err());
        assert!(depth_to_inverse(&MetricDepthFrame::constant(1, 1, 1.0).unwrap(), 0.0).is_err());
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn pose_relative_round_trip() {
        let a = Pose::new(
            nalgebra::Rotation3::from_euler_angles(0.1, -0.2, 0.3).into_inner(),
            Vector3::new(1.0, 2.0, 3.0),
        )
        .unwrap();
        let b = Pose::new(
            nalgebra::Rotation3::from_euler_angles(-0.3, 0.05, 0.2).into_inner(),
            Vector3::new(-1.0, 0.5, 2.0),
        )
        .unwrap();
        let p = Vector3::new(0.3, -0.4, 2.5);
        let world = a.transform(&p);
        let in_b = b.inverse().transform(&world);
        assert!((a.relative_to(&b).transform(&p) - in_b).norm() < 1e-12);
        let back = Pose::from_rows(&a.to_rows()).unwrap();
        assert_eq!(back, a);
    }

    proptest! {
        #[test]
        fn conversion_round_trip(depth in 0.1f64..100.0) {
            let eps = 1e-9;
            let d = MetricDepthFrame::dense(1, 1, vec![depth]).unwrap();
            let back = inverse_to_depth(&depth_to_inverse(&d, eps).unwrap(), eps).unwrap();
            prop_assert!(((back.values()[0] - depth) / depth).abs() <= 1e-9);
        }

        #[test]
        fn conversions_never_create_valid_pixels(
            vals in proptest::collection::vec(-5.0f64..5.0, 6),
            mask in proptest::collection::vec(any::<bool>(), 6),
        ) {
            let inv = InvDepthFrame::new(3, 2, vals, mask.clone()).unwrap();
            let d = inverse_to_depth(&inv, 1e-6).unwrap();
            let back = depth_to_inverse(&d, 1e-6).unwrap();
            for i in 0..6 {
                prop_assert!(!d.mask()[i] || mask[i]);
                prop_assert!(!back.mask()[i] || d.mask()[i]);
            }
        }
    }
}
