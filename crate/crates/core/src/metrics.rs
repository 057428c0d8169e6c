//! Evaluation protocol: whole-video alignment in inverse depth, AbsRel, δ1,
//! pose-based temporal alignment error, and temporal profiles.

use serde::{Deserialize, Serialize};

use crate::align::{apply_affine, fit_shared, fit_shift_only};
use crate::error::{Error, Result};
use crate::frame::{clip_to_depth, depth_to_inverse, AffineMap, CameraIntrinsics, Clip, Domain, Frame, InvClip, MetricDepthFrame, Pose};

/// Ratio threshold for δ1.
pub const DELTA1_THRESHOLD: f64 = 1.25;

/// Inverse depth below this is clamped before conversion back to depth.
pub const INVERSE_EPS: f64 = 1e-6;

fn joint<'a>(pred: &'a [MetricDepthFrame], gt: &'a [MetricDepthFrame]) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "{} predicted vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.dims() != g.dims() {
            return Err(Error::shape(format!("{:?} vs {:?}", p.dims(), g.dims())));
        }
    }
    Ok(pred.iter().zip(gt).flat_map(|(p, g)| {
        p.values()
            .iter()
            .zip(p.mask())
            .zip(g.values().iter().zip(g.mask()))
            .filter(|((_, &mp), (_, &mg))| mp && mg)
            .map(|((&a, _), (&b, _))| (a, b))
    }))
}

/// Mean of `|pred - gt| / gt` over jointly valid pixels.
pub fn absrel(pred: &[MetricDepthFrame], gt: &[MetricDepthFrame]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, g) in joint(pred, gt)? {
        sum += (p - g).abs() / g;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Fraction of jointly valid pixels with `max(p/g, g/p) < 1.25`.
pub fn delta1(pred: &[MetricDepthFrame], gt: &[MetricDepthFrame]) -> Result<f64> {
    let (mut hits, mut n) = (0usize, 0usize);
    for (p, g) in joint(pred, gt)? {
        if (p / g).max(g / p) < DELTA1_THRESHOLD {
            hits += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(hits as f64 / n as f64)
}

/// Moves every valid pixel of `src` into the view related by `rel`
/// (source camera to target camera) and keeps the nearest depth per target
/// pixel. Unreached pixels are invalid.
pub fn reproject(src: &MetricDepthFrame, rel: &Pose, k: &CameraIntrinsics) -> Result<MetricDepthFrame> {
    let (w, h) = src.dims();
    let mut depth = vec![f64::INFINITY; w * h];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !src.mask()[i] {
                continue;
            }
            let p = rel.transform(&k.backproject(c as f64, r as f64, src.values()[i]));
            let Some((u, v)) = k.project(&p) else { continue };
            let (tc, tr) = (u.round(), v.round());
            if tc < 0.0 || tr < 0.0 || tc >= w as f64 || tr >= h as f64 {
                continue;
            }
            let t = tr as usize * w + tc as usize;
            if p.z < depth[t] {
                depth[t] = p.z;
            }
        }
    }
    let mask: Vec<bool> = depth.iter().map(|d| d.is_finite()).collect();
    let values = depth.iter().map(|&d| if d.is_finite() { d } else { 0.0 }).collect();
    MetricDepthFrame::new(w, h, values, mask)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaeReport {
    pub tae: f64,
    /// Forward and backward AbsRel per evaluated pair.
    pub pairs: Vec<(usize, f64, f64)>,
    pub skipped: Vec<usize>,
}

/// Symmetric reprojection AbsRel between consecutive frames. Pairs where
/// either direction has no overlap are skipped and the average renormalized.
pub fn tae_detailed(depth: &[MetricDepthFrame], poses: &[Pose], k: &CameraIntrinsics) -> Result<TaeReport> {
    if depth.len() < 2 {
        return Err(Error::shape(format!("temporal error needs 2+ frames, got {}", depth.len())));
    }
    if poses.len() != depth.len() {
        return Err(Error::shape(format!("{} poses for {} frames", poses.len(), depth.len())));
    }
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for i in 0..depth.len() - 1 {
        let fwd = reproject(&depth[i], &poses[i].relative_to(&poses[i + 1]), k)?;
        let bwd = reproject(&depth[i + 1], &poses[i + 1].relative_to(&poses[i]), k)?;
        let a = absrel(std::slice::from_ref(&fwd), std::slice::from_ref(&depth[i + 1]));
        let b = absrel(std::slice::from_ref(&bwd), std::slice::from_ref(&depth[i]));
        match (a, b) {
            (Ok(a), Ok(b)) => pairs.push((i, a, b)),
            (Err(Error::EmptyMask), _) | (_, Err(Error::EmptyMask)) => {
                log::warn!("temporal error: pair {i} has no overlapping pixels, skipped");
                skipped.push(i);
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyMask);
    }
    let tae = pairs.iter().map(|(_, a, b)| a + b).sum::<f64>() / (2 * pairs.len()) as f64;
    Ok(TaeReport { tae, pairs, skipped })
}

pub fn tae(depth: &[MetricDepthFrame], poses: &[Pose], k: &CameraIntrinsics) -> Result<f64> {
    Ok(tae_detailed(depth, poses, k)?.tae)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub absrel: f64,
    pub delta1: f64,
    /// `None` when poses or intrinsics are unavailable.
    pub tae: Option<f64>,
    pub frames_evaluated: usize,
    pub alignment: AffineMap,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Camera track needed for the temporal term.
#[derive(Debug, Clone, Copy)]
pub struct Cameras<'a> {
    pub poses: &'a [Pose],
    pub intrinsics: &'a CameraIntrinsics,
}

/// Aligns the whole predicted video to ground truth with one least-squares
/// map in inverse depth, converts back to depth, and scores it.
pub fn evaluate_video(pred: &InvClip, gt_depth: &[MetricDepthFrame], cameras: Option<Cameras<'_>>) -> Result<EvalReport> {
    if pred.is_empty() || gt_depth.is_empty() {
        return Err(Error::shape("cannot evaluate an empty video"));
    }
    if pred.len() != gt_depth.len() {
        return Err(Error::shape(format!(
            "{} predicted vs {} ground-truth frames",
            pred.len(),
            gt_depth.len()
        )));
    }
    let gt_inv = gt_depth
        .iter()
        .map(|f| depth_to_inverse(f, INVERSE_EPS))
        .collect::<Result<Vec<_>>>()?;
    let mut warnings = Vec::new();
    // A prediction that already is the ground truth's inverse scores exactly,
    // without round-off from the fit and the reciprocal.
    let exact = pred.frames().iter().zip(&gt_inv).all(|(p, g)| p == g);
    let (map, aligned) = if exact {
        (AffineMap::IDENTITY, gt_depth.to_vec())
    } else {
        let map = match fit_shared(pred.frames(), &gt_inv) {
            Ok(fit) if !fit.non_positive_scale => fit.map,
            other => {
                warnings.push(match other {
                    Ok(fit) => format!("non-positive scale {:.6}, shift-only alignment used", fit.map.scale),
                    Err(e) => format!("{e}; shift-only alignment used"),
                });
                fit_shift_only(pred.frames(), &gt_inv)?.map
            }
        };
        (map, clip_to_depth(&apply_affine(pred, map)?, INVERSE_EPS)?.into_frames())
    };
    let depth = aligned.as_slice();
    let tae = match cameras {
        Some(c) if depth.len() >= 2 => Some(tae(depth, c.poses, c.intrinsics)?),
        _ => None,
    };
    Ok(EvalReport {
        absrel: absrel(depth, gt_depth)?,
        delta1: delta1(depth, gt_depth)?,
        tae,
        frames_evaluated: depth.len(),
        alignment: map,
        warnings,
    })
}

/// Column `column` of every frame side by side: a `height x N` raster.
/// Invalid source pixels stay invalid.
pub fn temporal_profile<D: Domain>(video: &Clip<D>, column: usize) -> Result<Frame<D>> {
    let (w, h) = video.dims();
    if column >= w {
        return Err(Error::shape(format!("column {column} outside width {w}")));
    }
    let n = video.len();
    let mut values = vec![0.0; h * n];
    let mut mask = vec![false; h * n];
    for (t, f) in video.frames().iter().enumerate() {
        for (r, (v, m)) in f.column(column).into_iter().enumerate() {
            if m {
                values[r * n + t] = v;
                mask[r * n + t] = true;
            }
        }
    }
    Frame::new(n, h, values, mask)
}

/// 8-bit grey levels: valid range stretched to 1..=255, invalid pixels 0.
pub fn profile_to_gray<D: Domain>(profile: &Frame<D>) -> Vec<u8> {
    let valid = profile.values().iter().zip(profile.mask()).filter(|(_, &m)| m).map(|(&v, _)| v);
    let (lo, hi) = valid.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    profile
        .values()
        .iter()
        .zip(profile.mask())
        .map(|(&v, &m)| {
            if !m {
                0
            } else if hi > lo {
                (1.0 + 254.0 * (v - lo) / (hi - lo)).round() as u8
            } else {
                128
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::InvDepthFrame;
    use nalgebra::{Matrix3, Vector3};
    use proptest::prelude::*;

    fn dense(values: &[f64]) -> MetricDepthFrame {
        MetricDepthFrame::dense(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn absrel_examples() {
        let gt = [dense(&[2.0, 4.0])];
        assert_eq!(absrel(&gt, &gt).unwrap(), 0.0);
        assert!((absrel(&[dense(&[1.0, 5.0])], &gt).unwrap() - 0.375).abs() < 1e-15);
        let scaled = [gt[0].map_valid(|v| 1.1 * v).unwrap()];
        assert!((absrel(&scaled, &gt).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn delta1_examples() {
        let gt = [dense(&[2.0, 4.0, 7.0])];
        assert_eq!(delta1(&gt, &gt).unwrap(), 1.0);
        assert_eq!(delta1(&[gt[0].map_valid(|v| 1.3 * v).unwrap()], &gt).unwrap(), 0.0);
        assert_eq!(delta1(&[gt[0].map_valid(|v| 1.2 * v).unwrap()], &gt).unwrap(), 1.0);
    }

    #[test]
    fn empty_mask_errors() {
        let a = MetricDepthFrame::new(2, 1, vec![1.0, 1.0], vec![false, false]).unwrap();
        assert!(matches!(
            absrel(std::slice::from_ref(&a), std::slice::from_ref(&a)),
            Err(Error::EmptyMask)
        ));
        assert!(matches!(
            delta1(std::slice::from_ref(&a), std::slice::from_ref(&a)),
            Err(Error::EmptyMask)
        ));
    }

    fn plane_frame() -> MetricDepthFrame {
        MetricDepthFrame::from_fn(16, 12, |r, c| 2.0 + 0.05 * r as f64 + 0.02 * c as f64).unwrap()
    }

    #[test]
    fn static_frames_have_zero_tae() {
        let k = CameraIntrinsics::centered(16, 12, 1.0).unwrap();
        let f = plane_frame();
        let v = tae(&[f.clone(), f.clone(), f], &[Pose::identity(); 3], &k).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn tae_pair_terms_swap() {
        let k = CameraIntrinsics::centered(16, 12, 1.0).unwrap();
        let a = plane_frame();
        let b = a.map_valid(|v| v * 1.02).unwrap();
        let rot = nalgebra::Rotation3::from_euler_angles(0.0, 0.02, 0.0).into_inner();
        let p0 = Pose::identity();
        let p1 = Pose::new(rot, Vector3::new(0.05, 0.0, 0.1)).unwrap();
        let fw = tae_detailed(&[a.clone(), b.clone()], &[p0, p1], &k).unwrap();
        let bw = tae_detailed(&[b, a], &[p1, p0], &k).unwrap();
        assert_eq!(fw.pairs[0].1, bw.pairs[0].2);
        assert_eq!(fw.pairs[0].2, bw.pairs[0].1);
    }

    #[test]
    fn tae_grows_with_injected_shift() {
        let k = CameraIntrinsics::centered(16, 12, 1.0).unwrap();
        let f = plane_frame();
        let poses = [Pose::identity(); 3];
        let mut last = -1.0;
        for shift in [0.0, 0.05, 0.2] {
            let frames = [f.clone(), f.map_valid(|v| v + shift).unwrap(), f.clone()];
            let v = tae(&frames, &poses, &k).unwrap();
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn disjoint_pair_is_skipped() {
        let k = CameraIntrinsics::centered(16, 12, 1.0).unwrap();
        let f = plane_frame();
        let away = Pose::new(Matrix3::identity(), Vector3::new(100.0, 0.0, 0.0)).unwrap();
        let rep = tae_detailed(&[f.clone(), f.clone(), f], &[Pose::identity(), Pose::identity(), away], &k).unwrap();
        assert_eq!(rep.skipped, vec![1]);
        assert_eq!(rep.pairs.len(), 1);
    }

    #[test]
    fn evaluate_rejects_empty_and_reports_null_tae() {
        let empty = InvClip::from_frames(Vec::new());
        assert!(empty.is_err() || evaluate_video(&empty.unwrap(), &[], None).is_err());
        let gt = vec![plane_frame(), plane_frame()];
        let pred = InvClip::from_frames(gt.iter().map(|f| depth_to_inverse(f, 1e-9).unwrap()).collect()).unwrap();
        let rep = evaluate_video(&pred, &gt, None).unwrap();
        assert!(rep.tae.is_none());
        assert!(rep.absrel < 1e-12);
        assert_eq!(rep.delta1, 1.0);
        let json = serde_json::to_value(&rep).unwrap();
        assert!(json["tae"].is_null());
    }

    #[test]
    fn power_of_two_affine_is_bitwise_invariant() {
        let gt = vec![plane_frame(), plane_frame().map_valid(|v| v * 1.1).unwrap()];
        let noisy: Vec<InvDepthFrame> = gt
            .iter()
            .enumerate()
            .map(|(t, f)| {
                let inv = depth_to_inverse(f, 1e-9).unwrap();
                let vals = inv
                    .values()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + 0.01 * (((i * 7 + t * 3) % 5) as f64 - 2.0))
                    .collect();
                InvDepthFrame::dense(16, 12, vals).unwrap()
            })
            .collect();
        let pred = InvClip::from_frames(noisy).unwrap();
        let base = evaluate_video(&pred, &gt, None).unwrap();
        let moved = evaluate_video(&apply_affine(&pred, AffineMap::new(4.0, 0.0)).unwrap(), &gt, None).unwrap();
        assert_eq!(base.absrel, moved.absrel);
        assert_eq!(base.delta1, moved.delta1);
    }

    #[test]
    fn ground_truth_scores_exactly() {
        let gt: Vec<MetricDepthFrame> = (1..5)
            .map(|k| MetricDepthFrame::from_fn(7, 5, |r, c| 0.7 + 0.31 * r as f64 + 0.17 * (c * k) as f64).unwrap())
            .collect();
        let pred = InvClip::from_frames(gt.iter().map(|f| depth_to_inverse(f, INVERSE_EPS).unwrap()).collect()).unwrap();
        let r = evaluate_video(&pred, &gt, None).unwrap();
        assert_eq!((r.absrel, r.delta1), (0.0, 1.0));
        assert_eq!(r.alignment, AffineMap::IDENTITY);
    }

    #[test]
    fn profile_shapes() {
        let f = MetricDepthFrame::constant(5, 4, 3.0).unwrap();
        let clip = Clip::from_frames(vec![f.clone(), f.clone(), f]).unwrap();
        let p = temporal_profile(&clip, 2).unwrap();
        assert_eq!(p.dims(), (3, 4));
        assert!(p.values().iter().all(|&v| v == 3.0));
        assert!(temporal_profile(&clip, 5).is_err());
        let single = Clip::from_frames(vec![plane_frame()]).unwrap();
        let p = temporal_profile(&single, 3).unwrap();
        let col: Vec<f64> = plane_frame().column(3).into_iter().map(|(v, _)| v).collect();
        assert_eq!(p.values(), &col[..]);
        assert!(profile_to_gray(&temporal_profile(&clip, 0).unwrap()).iter().all(|&g| g == 128));
    }

    fn frame_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>, Vec<bool>)> {
        (
            prop::collection::vec(0.1f64..20.0, 64),
            prop::collection::vec(0.1f64..20.0, 64),
            prop::collection::vec(prop::bool::weighted(0.9), 64),
            prop::collection::vec(prop::bool::weighted(0.9), 64),
        )
    }

    proptest! {
        #[test]
        fn metrics_match_brute_force((p, g, mp, mg) in frame_strategy()) {
            let pf = MetricDepthFrame::new(8, 8, p.clone(), mp.clone()).unwrap();
            let gf = MetricDepthFrame::new(8, 8, g.clone(), mg.clone()).unwrap();
            let (mut sum, mut hits, mut n) = (0.0, 0.0, 0.0);
            for r in 0..8 {
                for c in 0..8 {
                    let i = r * 8 + c;
                    if mp[i] && mg[i] {
                        sum += (p[i] - g[i]).abs() / g[i];
                        let ratio = if p[i] > g[i] { p[i] / g[i] } else { g[i] / p[i] };
                        if ratio < 1.25 { hits += 1.0; }
                        n += 1.0;
                    }
                }
            }
            prop_assume!(n > 0.0);
            prop_assert!((absrel(std::slice::from_ref(&pf), std::slice::from_ref(&gf)).unwrap() - sum / n).abs() <= 1e-12);
            prop_assert!((delta1(&[pf], &[gf]).unwrap() - hits / n).abs() <= 1e-12);
        }
    }
}
