//! Analytic ray-cast scenes: ground-truth depth video, poses, optical flow,
//! and flickering single-frame predictor oracles.
//!
//! World frame is y-up. Random numbers come from ChaCha8 (`rand_chacha`)
//! seeded with `seed_from_u64`, one ChaCha stream per independent draw
//! sequence, and normals from `rand_distr::StandardNormal`. Nothing depends
//! on evaluation order across frames.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{AffineMap, CameraIntrinsics, FlowField, InvClip, InvDepthFrame, MetricClip, MetricDepthFrame, Pose};
use crate::stitcher::ClipSpec;

/// Name recorded in manifests for the generator behind every random draw.
pub const RNG_NAME: &str = "ChaCha8 (rand_chacha 0.9, seed_from_u64, per-stream set_stream) + rand_distr StandardNormal";

/// Minimum distance between the camera centre and any geometry.
pub const MIN_CLEARANCE: f64 = 0.1;

/// Relative depth excess beyond which a reprojected point counts as occluded.
pub const OCCLUSION_TOLERANCE: f64 = 0.01;

const HIT_EPS: f64 = 1e-9;

/// Independent ChaCha8 stream `stream` of master seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneObject {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half_extents: [f64; 3] },
}

impl SceneObject {
    /// Nearest positive ray parameter of `origin + t * dir`.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            SceneObject::Sphere { center, radius } => {
                let oc = origin - Vector3::from(*center);
                let a = dir.dot(dir);
                let b = 2.0 * dir.dot(&oc);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / (2.0 * a);
                let t1 = (-b + sq) / (2.0 * a);
                [t0, t1].into_iter().find(|&t| t > HIT_EPS)
            }
            SceneObject::Box { center, half_extents } => {
                let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
                for axis in 0..3 {
                    let lo = center[axis] - half_extents[axis];
                    let hi = center[axis] + half_extents[axis];
                    if dir[axis].abs() < 1e-15 {
                        if origin[axis] < lo || origin[axis] > hi {
                            return None;
                        }
                        continue;
                    }
                    let a = (lo - origin[axis]) / dir[axis];
                    let b = (hi - origin[axis]) / dir[axis];
                    tmin = tmin.max(a.min(b));
                    tmax = tmax.min(a.max(b));
                }
                if tmax < tmin {
                    return None;
                }
                [tmin, tmax].into_iter().find(|&t| t > HIT_EPS)
            }
        }
    }

    fn distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            SceneObject::Sphere { center, radius } => (p - Vector3::from(*center)).norm() - radius,
            SceneObject::Box { center, half_extents } => {
                let q = Vector3::from_fn(|i, _| ((p[i] - center[i]).abs() - half_extents[i]).max(0.0));
                q.norm()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    /// Straight along world +z, `speed` meters per frame.
    Forward { speed: f64 },
    /// Circle of `radius` around the world y axis, facing the axis.
    Orbit { radius: f64, angular_step: f64 },
    /// Smoothed random walk in position and orientation.
    Handheld { sigma_pos: f64, sigma_rot: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Height (world y) of the ground plane.
    pub plane: f64,
    pub objects: Vec<SceneObject>,
    pub trajectory: Trajectory,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    pub intrinsics: CameraIntrinsics,
    /// Camera height (world y) at the start of the trajectory.
    pub camera_height: f64,
    /// Downward tilt of the optical axis, radians.
    pub pitch: f64,
    /// Hits beyond this depth are treated as sky.
    pub max_depth: f64,
    pub seed: u64,
}

impl SceneConfig {
    /// Named scene layouts used by the CLI and the experiments. Object
    /// placement is jittered by `seed`.
    pub fn preset(name: &str, frame_count: usize, width: usize, height: usize, seed: u64) -> Result<Self> {
        let intrinsics = CameraIntrinsics::centered(width, height, 70f64.to_radians())?;
        let mut rng = stream_rng(seed, u64::MAX - 1);
        let mut jitter = |s: f64| s * (rng.random::<f64>() - 0.5);
        let base = SceneConfig {
            plane: 0.0,
            objects: Vec::new(),
            trajectory: Trajectory::Forward { speed: 0.1 },
            frame_count,
            width,
            height,
            intrinsics,
            camera_height: 1.5,
            pitch: 0.3,
            max_depth: 60.0,
            seed,
        };
        let cfg = match name {
            "forward" => {
                let speed = 0.1;
                let end = frame_count as f64 * speed;
                let mut objects = vec![SceneObject::Sphere {
                    center: [jitter(0.4), 1.0 + jitter(0.3), end + 5.0 + jitter(1.0)],
                    radius: 1.0,
                }];
                for i in 0..((end / 3.0).ceil() as usize + 3) {
                    let z = 3.0 * i as f64 + 2.0 + jitter(1.0);
                    let side = if i % 2 == 0 { 1.0 } else { -1.0 };
                    objects.push(SceneObject::Box {
                        center: [side * (2.2 + jitter(0.6)), 0.6, z],
                        half_extents: [0.5, 0.6 + jitter(0.4), 0.5],
                    });
                }
                SceneConfig {
                    objects,
                    trajectory: Trajectory::Forward { speed },
                    ..base
                }
            }
            "orbit" => SceneConfig {
                objects: vec![
                    SceneObject::Sphere {
                        center: [jitter(0.5), 0.8, jitter(0.5)],
                        radius: 0.8,
                    },
                    SceneObject::Box {
                        center: [1.5 + jitter(0.4), 0.5, 0.5 + jitter(0.4)],
                        half_extents: [0.4, 0.5, 0.4],
                    },
                    SceneObject::Box {
                        center: [-1.2 + jitter(0.4), 0.3, -1.0 + jitter(0.4)],
                        half_extents: [0.5, 0.3, 0.6],
                    },
                ],
                trajectory: Trajectory::Orbit {
                    radius: 5.0,
                    angular_step: 0.02,
                },
                pitch: 0.35,
                ..base
            },
            "handheld" => SceneConfig {
                objects: vec![
                    SceneObject::Sphere {
                        center: [jitter(1.0), 0.7, 4.0 + jitter(1.0)],
                        radius: 0.7,
                    },
                    SceneObject::Box {
                        center: [1.6 + jitter(0.5), 0.8, 6.0 + jitter(1.0)],
                        half_extents: [0.6, 0.8, 0.6],
                    },
                    SceneObject::Box {
                        center: [-1.8 + jitter(0.5), 0.5, 3.5 + jitter(1.0)],
                        half_extents: [0.5, 0.5, 0.5],
                    },
                ],
                trajectory: Trajectory::Handheld {
                    sigma_pos: 0.01,
                    sigma_rot: 0.004,
                },
                ..base
            },
            "down" => SceneConfig {
                trajectory: Trajectory::Forward { speed: 0.05 },
                pitch: std::f64::consts::FRAC_PI_2,
                ..base
            },
            other => return Err(Error::config(format!("unknown scene preset {other:?}"))),
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_count < 2 {
            return Err(Error::config("frame_count must be at least 2"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("resolution must be non-zero"));
        }
        if !(self.max_depth > 0.0) {
            return Err(Error::config("max_depth must be positive"));
        }
        for obj in &self.objects {
            let ok = match obj {
                SceneObject::Sphere { radius, .. } => *radius > 0.0,
                SceneObject::Box { half_extents, .. } => half_extents.iter().all(|&h| h > 0.0),
            };
            if !ok {
                return Err(Error::config(format!("object with non-positive size: {obj:?}")));
            }
        }
        match self.trajectory {
            Trajectory::Orbit { radius, .. } if radius <= 0.0 => return Err(Error::config("orbit radius must be positive")),
            Trajectory::Handheld { sigma_pos, sigma_rot } if sigma_pos < 0.0 || sigma_rot < 0.0 => {
                return Err(Error::config("handheld sigmas must be non-negative"))
            }
            _ => {}
        }
        Ok(())
    }

    /// Camera-to-world pose of every frame.
    pub fn poses(&self) -> Result<Vec<Pose>> {
        let n = self.frame_count;
        let mut poses = Vec::with_capacity(n);
        match self.trajectory {
            Trajectory::Forward { speed } => {
                let r = look_rotation(&Vector3::new(0.0, -self.pitch.sin(), self.pitch.cos()));
                for k in 0..n {
                    poses.push(Pose::new(r, Vector3::new(0.0, self.camera_height, k as f64 * speed))?);
                }
            }
            Trajectory::Orbit { radius, angular_step } => {
                for k in 0..n {
                    let th = k as f64 * angular_step;
                    let pos = Vector3::new(radius * th.sin(), self.camera_height, -radius * th.cos());
                    let (hx, hz) = (-th.sin(), th.cos());
                    let fwd = Vector3::new(self.pitch.cos() * hx, -self.pitch.sin(), self.pitch.cos() * hz);
                    poses.push(Pose::new(look_rotation(&fwd), pos)?);
                }
            }
            Trajectory::Handheld { sigma_pos, sigma_rot } => {
                let mut rng = stream_rng(self.seed, 0);
                let base = look_rotation(&Vector3::new(0.0, -self.pitch.sin(), self.pitch.cos()));
                let mut pos = Vector3::new(0.0, self.camera_height, 0.0);
                let mut vel = Vector3::zeros();
                let mut ang = Vector3::zeros();
                let mut ang_vel = Vector3::<f64>::zeros();
                for _ in 0..n {
                    let rot = base * Rotation3::from_euler_angles(ang.x, ang.y, ang.z).into_inner();
                    poses.push(Pose::new(orthonormalize(&rot), pos)?);
                    let dp = Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng));
                    let da = Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng));
                    vel = 0.8 * vel + sigma_pos * dp;
                    ang_vel = 0.8 * ang_vel + sigma_rot * da;
                    pos += vel;
                    ang += ang_vel;
                }
            }
        }
        Ok(poses)
    }

    /// Depth (camera z) of the first surface seen through continuous pixel
    /// `(u, v)` = (col, row) from `pose`; `None` for sky.
    pub fn raycast(&self, pose: &Pose, u: f64, v: f64) -> Option<f64> {
        let k = &self.intrinsics;
        let dir_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let dir = pose.rotation * dir_cam;
        let origin = pose.translation;
        let mut best = f64::INFINITY;
        if dir.y.abs() > 1e-15 {
            let t = (self.plane - origin.y) / dir.y;
            if t > HIT_EPS {
                best = t;
            }
        }
        for obj in &self.objects {
            if let Some(t) = obj.intersect(&origin, &dir) {
                best = best.min(t);
            }
        }
        (best.is_finite() && best <= self.max_depth).then_some(best)
    }

    fn clearance(&self, p: &Vector3<f64>) -> f64 {
        self.objects.iter().map(|o| o.distance(p)).fold((p.y - self.plane).abs(), f64::min)
    }

    pub fn render(&self, pose: &Pose) -> Result<MetricDepthFrame> {
        let (w, h) = (self.width, self.height);
        let mut values = Vec::with_capacity(w * h);
        let mut mask = Vec::with_capacity(w * h);
        for r in 0..h {
            for c in 0..w {
                match self.raycast(pose, c as f64, r as f64) {
                    Some(z) => {
                        values.push(z);
                        mask.push(true);
                    }
                    None => {
                        values.push(0.0);
                        mask.push(false);
                    }
                }
            }
        }
        MetricDepthFrame::new(w, h, values, mask)
    }
}

/// Rotation with columns (right, down, forward) for a y-up world.
fn look_rotation(forward: &Vector3<f64>) -> Matrix3<f64> {
    let f = forward.normalize();
    let up = Vector3::y();
    let mut right = f.cross(&up);
    if right.norm() < 1e-9 {
        right = f.cross(&Vector3::z());
    }
    let right = right.normalize();
    let down = f.cross(&right);
    Matrix3::from_columns(&[right, down, f])
}

fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let x = m.column(0).normalize();
    let y = (m.column(1) - x * x.dot(&m.column(1))).normalize();
    Matrix3::from_columns(&[x, y, x.cross(&y)])
}

/// Ground-truth depth video with its camera track.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub depth: MetricClip,
    pub poses: Vec<Pose>,
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
    /// Analytic geometry; absent for sequences loaded from disk.
    pub scene: Option<SceneConfig>,
}

impl SyntheticSequence {
    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn inverse(&self) -> Result<InvClip> {
        crate::frame::clip_to_inverse(&self.depth, 1e-9)
    }
}

/// Renders every frame of the scene. Fails if the camera path comes within
/// [`MIN_CLEARANCE`] of any geometry.
pub fn generate_scene(config: &SceneConfig) -> Result<SyntheticSequence> {
    config.validate()?;
    let poses = config.poses()?;
    for (k, p) in poses.iter().enumerate() {
        let clearance = config.clearance(&p.translation);
        if clearance < MIN_CLEARANCE {
            return Err(Error::Collision { frame: k, clearance });
        }
    }
    let frames = poses.iter().map(|p| config.render(p)).collect::<Result<Vec<_>>>()?;
    Ok(SyntheticSequence {
        depth: MetricClip::from_frames(frames)?,
        poses,
        intrinsics: config.intrinsics,
        seed: config.seed,
        scene: Some(config.clone()),
    })
}

/// Flow from frame `k` to `k + 1` derived from the poses and the analytic
/// scene. Pixels that leave the image or whose reprojected depth exceeds the
/// target surface by more than [`OCCLUSION_TOLERANCE`] are invalid.
pub fn gt_optical_flow(seq: &SyntheticSequence, k: usize) -> Result<FlowField> {
    let scene = seq
        .scene
        .as_ref()
        .ok_or_else(|| Error::Flow("sequence carries no analytic scene description".into()))?;
    if k + 1 >= seq.len() {
        return Err(Error::Flow(format!("frame {k} has no successor in {} frames", seq.len())));
    }
    let src = &seq.depth.frames()[k];
    let (w, h) = src.dims();
    let rel = seq.poses[k].relative_to(&seq.poses[k + 1]);
    let kk = &seq.intrinsics;
    let mut vectors = vec![[0.0; 2]; w * h];
    let mut mask = vec![false; w * h];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !src.mask()[i] {
                continue;
            }
            let p = rel.transform(&kk.backproject(c as f64, r as f64, src.values()[i]));
            let Some((u, v)) = kk.project(&p) else { continue };
            if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
                continue;
            }
            let Some(target) = scene.raycast(&seq.poses[k + 1], u, v) else {
                continue;
            };
            if p.z > target * (1.0 + OCCLUSION_TOLERANCE) {
                continue;
            }
            vectors[i] = [u - c as f64, v - r as f64];
            mask[i] = true;
        }
    }
    FlowField::new(w, h, vectors, mask)
}

pub fn all_flows(seq: &SyntheticSequence) -> Result<Vec<FlowField>> {
    (0..seq.len().saturating_sub(1)).map(|k| gt_optical_flow(seq, k)).collect()
}

/// Noise model of a flickering single-frame (or per-window) predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlickerParams {
    /// Stdev of the per-frame log-scale.
    pub sigma_scale: f64,
    /// Stdev of the per-frame shift, inverse-depth units.
    pub sigma_shift: f64,
    /// Stdev of independent per-pixel noise, inverse-depth units.
    pub sigma_pixel: f64,
    /// Stdev of the per-window log-scale.
    pub sigma_window_scale: f64,
    /// Stdev of the per-window shift.
    pub sigma_window_shift: f64,
    pub seed: u64,
}

impl Default for FlickerParams {
    fn default() -> Self {
        Self {
            sigma_scale: 0.0,
            sigma_shift: 0.0,
            sigma_pixel: 0.0,
            sigma_window_scale: 0.0,
            sigma_window_shift: 0.0,
            seed: 0,
        }
    }
}

impl FlickerParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sigma_scale,
            self.sigma_shift,
            self.sigma_pixel,
            self.sigma_window_scale,
            self.sigma_window_shift,
        ];
        if all.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::config("flicker sigmas must be non-negative"));
        }
        Ok(())
    }
}

const WINDOW_STREAMS: u64 = 1 << 62;
const WINDOW_PIXEL_STREAMS: u64 = 1 << 61;

/// Per-frame affine drawn for global frame index `frame`.
pub fn frame_affine(params: &FlickerParams, frame: usize) -> AffineMap {
    let mut rng = stream_rng(params.seed, frame as u64);
    let log_s = params.sigma_scale * normal(&mut rng);
    let t = params.sigma_shift * normal(&mut rng);
    AffineMap::new(log_s.exp(), t)
}

/// Shared affine drawn for window `ordinal`.
pub fn window_affine(params: &FlickerParams, ordinal: usize) -> AffineMap {
    let mut rng = stream_rng(params.seed, WINDOW_STREAMS | ordinal as u64);
    let log_s = params.sigma_window_scale * normal(&mut rng);
    let t = params.sigma_window_shift * normal(&mut rng);
    AffineMap::new(log_s.exp(), t)
}

fn perturb(frame: &InvDepthFrame, map: AffineMap, sigma_pixel: f64, rng: &mut ChaCha8Rng) -> Result<InvDepthFrame> {
    let values = frame
        .values()
        .iter()
        .zip(frame.mask())
        .map(|(&v, &m)| {
            // Draw for every pixel so the stream position never depends on the mask.
            let noise = if sigma_pixel > 0.0 { sigma_pixel * normal(rng) } else { 0.0 };
            if m {
                map.apply(v) + noise
            } else {
                v
            }
        })
        .collect();
    InvDepthFrame::new(frame.width(), frame.height(), values, frame.mask().to_vec())
}

/// Frame `i` becomes `s_i * gt_i + t_i + noise` with `log s_i ~ N(0, σ_s²)`,
/// `t_i ~ N(0, σ_t²)` and per-pixel `N(0, σ_p²)`. Draws are keyed by the
/// global timeline index.
pub fn flicker_predictor(gt: &InvClip, params: &FlickerParams) -> Result<InvClip> {
    params.validate()?;
    let frames = gt
        .frames()
        .iter()
        .zip(gt.timeline())
        .map(|(f, &t)| {
            let map = frame_affine(params, t);
            let mut rng = stream_rng(params.seed, t as u64);
            // Skip the two affine draws.
            normal(&mut rng);
            normal(&mut rng);
            perturb(f, map, params.sigma_pixel, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    InvClip::new(frames, gt.timeline().to_vec())
}

/// Restricts `gt` to the frames named by `spec` (keys, overlap, future) and
/// applies one shared affine for the window plus per-pixel noise. Noise on a
/// given frame depends only on `(seed, ordinal, frame index)`.
pub fn windowed_flicker_predictor(gt: &InvClip, params: &FlickerParams, spec: &ClipSpec) -> Result<InvClip> {
    params.validate()?;
    let indices = spec.frame_indices();
    let map = window_affine(params, spec.ordinal);
    let frames = indices
        .iter()
        .map(|&idx| {
            let pos = gt
                .timeline()
                .binary_search(&idx)
                .map_err(|_| Error::shape(format!("frame {idx} not in ground-truth timeline")))?;
            let stream = WINDOW_PIXEL_STREAMS | ((spec.ordinal as u64) << 32) | idx as u64;
            let mut rng = stream_rng(params.seed, stream);
            perturb(&gt.frames()[pos], map, params.sigma_pixel, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    InvClip::new(frames, indices)
}
