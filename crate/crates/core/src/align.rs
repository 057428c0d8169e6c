//! Least-squares scale/shift alignment and median/MAD normalization, both in
//! inverse-depth space.

use crate::error::{Error, Result};
use crate::frame::{AffineMap, InvClip, InvDepthFrame};

/// Whether one affine map spans all frames or each frame gets its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AlignmentScope {
    PerFrame,
    SharedAcrossClip,
}

/// Result of a least-squares fit of `scale * pred + shift ≈ target`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Fit {
    pub map: AffineMap,
    /// Sum of squared residuals over the joint valid pixels.
    pub residual: f64,
    pub count: usize,
    /// Set when the fitted scale is `<= 0`. Callers decide whether to reject.
    pub non_positive_scale: bool,
}

fn check_pair(pred: &InvDepthFrame, target: &InvDepthFrame) -> Result<()> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(format!("prediction {:?} vs target {:?}", pred.dims(), target.dims())));
    }
    Ok(())
}

fn joint_pairs<'a>(pred: &'a [InvDepthFrame], target: &'a [InvDepthFrame]) -> Result<impl Iterator<Item = (f64, f64)> + Clone + 'a> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!("{} vs {} frames", pred.len(), target.len())));
    }
    for (p, t) in pred.iter().zip(target) {
        check_pair(p, t)?;
    }
    Ok(pred.iter().zip(target).flat_map(|(p, t)| {
        p.values()
            .iter()
            .zip(p.mask())
            .zip(t.values().iter().zip(t.mask()))
            .filter(|((_, &mp), (_, &mt))| mp && mt)
            .map(|((&a, _), (&b, _))| (a, b))
    }))
}

fn fit_pairs(pairs: impl Iterator<Item = (f64, f64)> + Clone) -> Result<Fit> {
    let (mut n, mut sp, mut st) = (0usize, 0.0, 0.0);
    for (p, t) in pairs.clone() {
        n += 1;
        sp += p;
        st += t;
    }
    if n < 2 {
        return Err(Error::DegenerateFit(format!("{n} joint valid pixels, need at least 2")));
    }
    let (mp, mt) = (sp / n as f64, st / n as f64);
    let (mut var, mut cov) = (0.0, 0.0);
    for (p, t) in pairs.clone() {
        var += (p - mp) * (p - mp);
        cov += (p - mp) * (t - mt);
    }
    if var <= 0.0 {
        return Err(Error::DegenerateFit("prediction has zero variance".into()));
    }
    let scale = cov / var;
    let shift = mt - scale * mp;
    let map = AffineMap::new(scale, shift);
    let residual = pairs.map(|(p, t)| (map.apply(p) - t).powi(2)).sum();
    Ok(Fit {
        map,
        residual,
        count: n,
        non_positive_scale: scale <= 0.0,
    })
}

/// One map shared by every frame.
pub fn fit_shared(pred: &[InvDepthFrame], target: &[InvDepthFrame]) -> Result<Fit> {
    fit_pairs(joint_pairs(pred, target)?)
}

/// Shift-only fit with the scale pinned to 1.
pub fn fit_shift_only(pred: &[InvDepthFrame], target: &[InvDepthFrame]) -> Result<Fit> {
    let pairs = joint_pairs(pred, target)?;
    let (mut n, mut sum) = (0usize, 0.0);
    for (p, t) in pairs.clone() {
        n += 1;
        sum += t - p;
    }
    if n == 0 {
        return Err(Error::DegenerateFit("no joint valid pixels".into()));
    }
    let map = AffineMap::new(1.0, sum / n as f64);
    let residual = pairs.map(|(p, t)| (map.apply(p) - t).powi(2)).sum();
    Ok(Fit {
        map,
        residual,
        count: n,
        non_positive_scale: false,
    })
}

/// Closed-form least-squares `(scale, shift)` from `pred` to `target`.
/// Returns one fit for [`AlignmentScope::SharedAcrossClip`] and one per frame
/// otherwise.
pub fn lstsq_scale_shift(pred: &[InvDepthFrame], target: &[InvDepthFrame], scope: AlignmentScope) -> Result<Vec<Fit>> {
    match scope {
        AlignmentScope::SharedAcrossClip => Ok(vec![fit_shared(pred, target)?]),
        AlignmentScope::PerFrame => {
            if pred.len() != target.len() {
                return Err(Error::shape(format!("{} vs {} frames", pred.len(), target.len())));
            }
            pred.iter()
                .zip(target)
                .map(|(p, t)| fit_shared(std::slice::from_ref(p), std::slice::from_ref(t)))
                .collect()
        }
    }
}

pub fn apply_affine_frame(frame: &InvDepthFrame, map: AffineMap) -> Result<InvDepthFrame> {
    frame.map_valid(|v| map.apply(v))
}

/// Every valid value becomes `scale * v + shift`; masks are unchanged.
pub fn apply_affine(clip: &InvClip, map: AffineMap) -> Result<InvClip> {
    clip.map_frames(|f| apply_affine_frame(f, map))
}

/// Median/MAD normalization shared over a set of frames, kept around so
/// gradients can be pulled back through it exactly.
///
/// The median of an even count is the mean of the two middle values. MAD is
/// the mean absolute deviation from the median.
#[derive(Debug, Clone)]
pub struct SsiNormalization {
    pub median: f64,
    pub mad: f64,
    /// `(frame, pixel, weight)` of the order statistics forming the median.
    median_taps: Vec<(usize, usize, f64)>,
    /// Σ sign(v − median) over valid pixels.
    sign_sum: f64,
    count: usize,
    /// Normalized values per frame (0 at invalid pixels).
    pub normalized: Vec<Vec<f64>>,
}

impl SsiNormalization {
    pub fn new(frames: &[InvDepthFrame]) -> Result<Self> {
        let mut entries: Vec<(f64, usize, usize)> = Vec::new();
        for (f, frame) in frames.iter().enumerate() {
            for (i, (&v, &m)) in frame.values().iter().zip(frame.mask()).enumerate() {
                if m {
                    entries.push((v, f, i));
                }
            }
        }
        let n = entries.len();
        if n < 2 {
            return Err(Error::DegenerateFit(format!("{n} valid pixels, need at least 2")));
        }
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let (median, median_taps) = if n % 2 == 1 {
            let (v, f, i) = entries[n / 2];
            (v, vec![(f, i, 1.0)])
        } else {
            let (a, fa, ia) = entries[n / 2 - 1];
            let (b, fb, ib) = entries[n / 2];
            (0.5 * (a + b), vec![(fa, ia, 0.5), (fb, ib, 0.5)])
        };
        let (mut abs_sum, mut sign_sum) = (0.0, 0.0);
        for frame in frames {
            for (&v, &m) in frame.values().iter().zip(frame.mask()) {
                if m {
                    abs_sum += (v - median).abs();
                    sign_sum += sign(v - median);
                }
            }
        }
        let mad = abs_sum / n as f64;
        if !(mad > 0.0) {
            return Err(Error::DegenerateFit("all valid values are equal (MAD = 0)".into()));
        }
        let normalized = frames
            .iter()
            .map(|frame| {
                frame
                    .values()
                    .iter()
                    .zip(frame.mask())
                    .map(|(&v, &m)| if m { (v - median) / mad } else { 0.0 })
                    .collect()
            })
            .collect();
        Ok(Self {
            median,
            mad,
            median_taps,
            sign_sum,
            count: n,
            normalized,
        })
    }

    /// Pulls `d loss / d normalized` back to `d loss / d raw`, including the
    /// dependence of the median and MAD on the raw values.
    pub fn backward(&self, frames: &[InvDepthFrame], upstream: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.count as f64;
        let (mut sum_g, mut sum_gd) = (0.0, 0.0);
        for ((frame, g), d) in frames.iter().zip(upstream).zip(&self.normalized) {
            for i in 0..frame.len() {
                if frame.mask()[i] {
                    sum_g += g[i];
                    sum_gd += g[i] * d[i];
                }
            }
        }
        let mut grads: Vec<Vec<f64>> = frames
            .iter()
            .zip(upstream)
            .map(|(frame, g)| {
                frame
                    .values()
                    .iter()
                    .zip(frame.mask())
                    .zip(g)
                    .map(|((&v, &m), &gi)| {
                        if m {
                            (gi - sum_gd * sign(v - self.median) / n) / self.mad
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        // d median / d v is nonzero only at the median taps; it also shifts
        // the MAD through the sign sum.
        for &(f, i, w) in &self.median_taps {
            grads[f][i] += (-sum_g * w + sum_gd * self.sign_sum * w / n) / self.mad;
        }
        grads
    }

    pub fn to_frames(&self, like: &[InvDepthFrame]) -> Result<Vec<InvDepthFrame>> {
        like.iter()
            .zip(&self.normalized)
            .map(|(f, d)| InvDepthFrame::new(f.width(), f.height(), d.clone(), f.mask().to_vec()))
            .collect()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Subtracts the shared median and divides by the mean absolute deviation.
pub fn normalize_ssi(frames: &[InvDepthFrame]) -> Result<Vec<InvDepthFrame>> {
    SsiNormalization::new(frames)?.to_frames(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(values: &[f64]) -> InvDepthFrame {
        InvDepthFrame::dense(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn exact_affine_relation() {
        let fit = fit_shared(&[row(&[1.0, 2.0, 3.0])], &[row(&[3.0, 5.0, 7.0])]).unwrap();
        assert_eq!(fit.map, AffineMap::new(2.0, 1.0));
        assert_eq!(fit.residual, 0.0);
    }

    #[test]
    fn identity_fit() {
        let f = row(&[0.3, 0.9, 0.1, 0.7]);
        let fit = fit_shared(std::slice::from_ref(&f), std::slice::from_ref(&f)).unwrap();
        assert_eq!(fit.map, AffineMap::IDENTITY);
    }

    #[test]
    fn flat_target_flags_non_positive_scale() {
        let fit = fit_shared(&[row(&[1.0, 2.0])], &[row(&[5.0, 5.0])]).unwrap();
        assert_eq!(fit.map, AffineMap::new(0.0, 5.0));
        assert!(fit.non_positive_scale);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(fit_shared(&[row(&[1.0])], &[row(&[2.0])]), Err(Error::DegenerateFit(_))));
        assert!(matches!(
            fit_shared(&[row(&[2.0, 2.0])], &[row(&[1.0, 3.0])]),
            Err(Error::DegenerateFit(_))
        ));
        let masked = InvDepthFrame::new(3, 1, vec![1.0, 2.0, 3.0], vec![true, false, false]).unwrap();
        assert!(fit_shared(&[masked], &[row(&[1.0, 2.0, 3.0])]).is_err());
    }

    #[test]
    fn apply_affine_arithmetic() {
        let clip = InvClip::from_frames(vec![row(&[3.0, -1.0])]).unwrap();
        assert_eq!(apply_affine(&clip, AffineMap::IDENTITY).unwrap(), clip);
        let out = apply_affine(&clip, AffineMap::new(2.0, 1.0)).unwrap();
        assert_eq!(out.frames()[0].values(), &[7.0, -1.0]);
    }

    #[test]
    fn affine_group_inverse() {
        let orig = row(&[0.2, 0.5, 0.9, 0.4, 0.7]);
        let clip = InvClip::from_frames(vec![orig.clone()]).unwrap();
        let map = AffineMap::new(1.7, -0.3);
        let moved = apply_affine(&clip, map).unwrap();
        let fit = fit_shared(moved.frames(), &[orig]).unwrap();
        let inv = map.inverse();
        assert!((fit.map.scale - inv.scale).abs() < 1e-9);
        assert!((fit.map.shift - inv.shift).abs() < 1e-9);
    }

    #[test]
    fn median_mad_example() {
        let out = normalize_ssi(&[row(&[1.0, 2.0, 3.0])]).unwrap();
        let v = out[0].values();
        assert!((v[0] + 1.5).abs() < 1e-15 && v[1] == 0.0 && (v[2] - 1.5).abs() < 1e-15);
        assert!(matches!(normalize_ssi(&[row(&[4.0, 4.0, 4.0])]), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn normalization_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<InvDepthFrame> = (0..2)
            .map(|_| InvDepthFrame::dense(3, 3, (0..9).map(|_| rng.random::<f64>()).collect()).unwrap())
            .collect();
        let weights: Vec<Vec<f64>> = (0..2).map(|_| (0..9).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let objective = |fs: &[InvDepthFrame]| -> f64 {
            let n = SsiNormalization::new(fs).unwrap();
            n.normalized
                .iter()
                .zip(&weights)
                .flat_map(|(d, w)| d.iter().zip(w))
                .map(|(a, b)| a * b)
                .sum()
        };
        let norm = SsiNormalization::new(&frames).unwrap();
        let grad = norm.backward(&frames, &weights);
        let h = 1e-7;
        for f in 0..2 {
            for i in 0..9 {
                let bump = |delta: f64| {
                    let mut fs = frames.clone();
                    let mut vals = fs[f].values().to_vec();
                    vals[i] += delta;
                    fs[f] = InvDepthFrame::dense(3, 3, vals).unwrap();
                    objective(&fs)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!((fd - grad[f][i]).abs() < 1e-6, "frame {f} px {i}: fd {fd} vs {}", grad[f][i]);
            }
        }
    }

    proptest! {
        #[test]
        fn fit_is_locally_optimal(
            pred in proptest::collection::vec(0.0f64..1.0, 8),
            target in proptest::collection::vec(0.0f64..1.0, 8),
        ) {
            let (p, t) = (row(&pred), row(&target));
            if let Ok(fit) = fit_shared(std::slice::from_ref(&p), std::slice::from_ref(&t)) {
                let cost = |m: AffineMap| -> f64 {
                    pred.iter().zip(&target).map(|(a, b)| (m.apply(*a) - b).powi(2)).sum()
                };
                let base = cost(fit.map);
                for (ds, dt) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3)] {
                    let m = AffineMap::new(fit.map.scale + ds, fit.map.shift + dt);
                    prop_assert!(cost(m) >= base - 1e-12);
                }
            }
        }

        #[test]
        fn fit_is_affine_equivariant(
            pred in proptest::collection::vec(0.0f64..1.0, 8),
            target in proptest::collection::vec(0.0f64..1.0, 8),
            a in 0.1f64..5.0,
            b in -2.0f64..2.0,
        ) {
            let p = row(&pred);
            if let Ok(fit) = fit_shared(std::slice::from_ref(&p), &[row(&target)]) {
                let moved: Vec<f64> = target.iter().map(|t| a * t + b).collect();
                let fit2 = fit_shared(&[p], &[row(&moved)]).unwrap();
                prop_assert!((fit2.map.scale - a * fit.map.scale).abs() < 1e-9);
                prop_assert!((fit2.map.shift - (a * fit.map.shift + b)).abs() < 1e-9);
            }
        }

        #[test]
        fn shared_residual_dominates_per_frame(
            pred in proptest::collection::vec(0.0f64..1.0, 12),
            target in proptest::collection::vec(0.0f64..1.0, 12),
        ) {
            let p = [row(&pred[..6]), row(&pred[6..])];
            let t = [row(&target[..6]), row(&target[6..])];
            if let (Ok(shared), Ok(each)) = (
                fit_shared(&p, &t),
                lstsq_scale_shift(&p, &t, AlignmentScope::PerFrame),
            ) {
                let sum: f64 = each.iter().map(|f| f.residual).sum();
                prop_assert!(shared.residual >= sum - 1e-12);
            }
        }

        #[test]
        fn normalization_is_affine_invariant(
            vals in proptest::collection::vec(0.0f64..1.0, 9),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let base = normalize_ssi(&[row(&vals)]);
            let moved: Vec<f64> = vals.iter().map(|v| a * v + b).collect();
            if let (Ok(x), Ok(y)) = (base, normalize_ssi(&[row(&moved)])) {
                for (u, v) in x[0].values().iter().zip(y[0].values()) {
                    prop_assert!((u - v).abs() < 1e-9);
                }
            }
        }
    }
}
