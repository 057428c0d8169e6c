//! Long-video inference by overlapping windows: planning, window-to-window
//! affine alignment, overlap blending, and the four ablation strategies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::align::{apply_affine, fit_shared, fit_shift_only};
use crate::error::{Error, Result};
use crate::frame::{AffineMap, InvClip, InvDepthFrame};
use crate::synth::{generate_scene, windowed_flicker_predictor, FlickerParams, SceneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Disjoint windows, concatenated.
    Baseline,
    /// Overlap used for alignment only; previous values kept.
    Oa,
    /// Overlap blended, no alignment.
    Oi,
    /// Key frames plus overlap for alignment, then blending.
    OiKr,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Baseline, Strategy::Oa, Strategy::Oi, Strategy::OiKr];

    pub fn label(&self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Oa => "oa",
            Strategy::Oi => "oi",
            Strategy::OiKr => "oi-kr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.label() == s.to_ascii_lowercase())
    }

    fn uses_overlap(&self) -> bool {
        !matches!(self, Strategy::Baseline)
    }

    fn uses_keys(&self) -> bool {
        matches!(self, Strategy::OiKr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchConfig {
    /// Frames per window.
    pub window: usize,
    pub overlap: usize,
    pub keyframes: usize,
    pub keyframe_stride: usize,
    pub strategy: Strategy,
}

impl Default for StitchConfig {
    fn default() -> Self {
        Self {
            window: 32,
            overlap: 8,
            keyframes: 2,
            keyframe_stride: 12,
            strategy: Strategy::OiKr,
        }
    }
}

impl StitchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.overlap + self.keyframes >= self.window {
            return Err(Error::config(format!(
                "overlap {} + keyframes {} must be below window {}",
                self.overlap, self.keyframes, self.window
            )));
        }
        if self.strategy.uses_overlap() && self.overlap == 0 {
            return Err(Error::config(format!("strategy {} needs overlap >= 1", self.strategy.label())));
        }
        if self.keyframe_stride == 0 {
            return Err(Error::config("keyframe stride must be >= 1"));
        }
        Ok(())
    }

    pub fn effective_overlap(&self) -> usize {
        if self.strategy.uses_overlap() {
            self.overlap
        } else {
            0
        }
    }

    pub fn effective_keyframes(&self) -> usize {
        if self.strategy.uses_keys() {
            self.keyframes
        } else {
            0
        }
    }

    /// Future frames per window after the first.
    pub fn stride(&self) -> usize {
        self.window - self.effective_overlap() - self.effective_keyframes()
    }

    /// Video length that yields exactly `windows` windows.
    pub fn frames_for_windows(&self, windows: usize) -> usize {
        self.window + windows.saturating_sub(1) * self.stride()
    }
}

/// Global frame indices fed to one predictor call, in order keys, overlap,
/// future.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub ordinal: usize,
    pub key_indices: Vec<usize>,
    pub overlap_indices: Vec<usize>,
    pub future_indices: Vec<usize>,
}

impl ClipSpec {
    pub fn frame_indices(&self) -> Vec<usize> {
        let mut all = self.key_indices.clone();
        all.extend(&self.overlap_indices);
        all.extend(&self.future_indices);
        all
    }

    pub fn len(&self) -> usize {
        self.key_indices.len() + self.overlap_indices.len() + self.future_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frames used to fit the window-to-window map.
    pub fn reused_indices(&self) -> Vec<usize> {
        let mut all = self.key_indices.clone();
        all.extend(&self.overlap_indices);
        all
    }
}

pub fn plan_windows(total: usize, cfg: &StitchConfig) -> Result<Vec<ClipSpec>> {
    cfg.validate()?;
    if total == 0 {
        return Err(Error::config("video has no frames"));
    }
    let (t_o, t_k) = (cfg.effective_overlap(), cfg.effective_keyframes());
    let first = cfg.window.min(total);
    let mut plan = vec![ClipSpec {
        ordinal: 0,
        key_indices: Vec::new(),
        overlap_indices: Vec::new(),
        future_indices: (0..first).collect(),
    }];
    let mut processed = first;
    while processed < total {
        let start = processed - t_o;
        let mut keys: Vec<usize> = (1..=t_k).map(|j| start.saturating_sub(j * cfg.keyframe_stride)).collect();
        keys.sort_unstable();
        keys.dedup();
        let take = cfg.stride().min(total - processed);
        plan.push(ClipSpec {
            ordinal: plan.len(),
            key_indices: keys,
            overlap_indices: (start..processed).collect(),
            future_indices: (processed..processed + take).collect(),
        });
        processed += take;
    }
    Ok(plan)
}

/// Anything that maps the frames named by a [`ClipSpec`] to one inverse-depth
/// clip of the same length.
pub trait ClipPredictor<P> {
    fn predict(&mut self, spec: &ClipSpec, frames: &[&P]) -> Result<InvClip>;
}

impl<P, F> ClipPredictor<P> for F
where
    F: FnMut(&ClipSpec, &[&P]) -> Result<InvClip>,
{
    fn predict(&mut self, spec: &ClipSpec, frames: &[&P]) -> Result<InvClip> {
        self(spec, frames)
    }
}

/// Returns its input unchanged.
#[derive(Debug, Default, Clone, Copy)]
pub struct PassThrough;

impl ClipPredictor<InvDepthFrame> for PassThrough {
    fn predict(&mut self, spec: &ClipSpec, frames: &[&InvDepthFrame]) -> Result<InvClip> {
        InvClip::new(frames.iter().map(|f| (*f).clone()).collect(), spec.frame_indices())
    }
}

/// Window-level flicker oracle over ground-truth payload frames.
#[derive(Debug, Clone, Copy)]
pub struct WindowedFlicker {
    pub params: FlickerParams,
}

impl ClipPredictor<InvDepthFrame> for WindowedFlicker {
    fn predict(&mut self, spec: &ClipSpec, frames: &[&InvDepthFrame]) -> Result<InvClip> {
        let gt = PassThrough.predict(spec, frames)?;
        windowed_flicker_predictor(&gt, &self.params, spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitKind {
    None,
    ScaleShift,
    ShiftOnly,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowAlignment {
    pub map: AffineMap,
    pub kind: FitKind,
    pub warnings: Vec<String>,
}

/// Fits one map from the current prediction's reused frames (keys and
/// overlap) to their committed values and applies it to the whole clip.
/// Degenerate or non-positive fits fall back to shift-only, then identity.
pub fn align_window(cur: &InvClip, committed: &BTreeMap<usize, InvDepthFrame>, spec: &ClipSpec) -> Result<(InvClip, WindowAlignment)> {
    if cur.len() != spec.len() {
        return Err(Error::shape(format!("clip has {} frames, spec names {}", cur.len(), spec.len())));
    }
    let reused = spec.reused_indices();
    let pred: Vec<InvDepthFrame> = cur.frames()[..reused.len()].to_vec();
    let target = reused
        .iter()
        .map(|i| {
            committed
                .get(i)
                .cloned()
                .ok_or_else(|| Error::shape(format!("frame {i} is not committed yet")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut warnings = Vec::new();
    let exact = pred.iter().zip(&target).all(|(p, t)| {
        p.values()
            .iter()
            .zip(p.mask())
            .zip(t.values().iter().zip(t.mask()))
            .all(|((a, &ma), (b, &mb))| !(ma && mb) || a == b)
    });
    let fitted = if exact {
        // The least-squares solution is the identity; skip the round-off.
        Ok(crate::align::Fit {
            map: AffineMap::IDENTITY,
            residual: 0.0,
            count: 0,
            non_positive_scale: false,
        })
    } else {
        fit_shared(&pred, &target)
    };
    let (map, kind) = match fitted {
        Ok(fit) if !fit.non_positive_scale => (fit.map, FitKind::ScaleShift),
        first => {
            match first {
                Ok(fit) => warnings.push(format!(
                    "window {}: non-positive scale {:.6}, falling back to shift-only",
                    spec.ordinal, fit.map.scale
                )),
                Err(e) => warnings.push(format!("window {}: {e}, falling back to shift-only", spec.ordinal)),
            }
            match fit_shift_only(&pred, &target) {
                Ok(fit) => (fit.map, FitKind::ShiftOnly),
                Err(e) => {
                    warnings.push(format!("window {}: {e}, using identity", spec.ordinal));
                    (AffineMap::IDENTITY, FitKind::Identity)
                }
            }
        }
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    let aligned = apply_affine(cur, map)?;
    Ok((aligned, WindowAlignment { map, kind, warnings }))
}

/// Blend weight of overlap position `i` (1-based) out of `t_o`.
pub fn overlap_weight(i: usize, t_o: usize) -> f64 {
    if t_o <= 1 {
        1.0
    } else {
        (t_o - i) as f64 / (t_o - 1) as f64
    }
}

/// `prev * w_i + cur * (1 - w_i)` with `w_i` falling linearly from 1 to 0.
pub fn stitch_overlap(prev: &[InvDepthFrame], cur: &[InvDepthFrame]) -> Result<Vec<InvDepthFrame>> {
    if prev.len() != cur.len() {
        return Err(Error::shape(format!(
            "{} previous vs {} current overlap frames",
            prev.len(),
            cur.len()
        )));
    }
    let t_o = prev.len();
    prev.iter()
        .zip(cur)
        .enumerate()
        .map(|(k, (p, c))| {
            if p.dims() != c.dims() {
                return Err(Error::shape(format!("overlap frame {}: {:?} vs {:?}", k + 1, p.dims(), c.dims())));
            }
            let w = overlap_weight(k + 1, t_o);
            let values = p
                .values()
                .iter()
                .zip(c.values())
                .map(|(&a, &b)| {
                    if w == 1.0 || a == b {
                        a
                    } else if w == 0.0 {
                        b
                    } else {
                        a * w + b * (1.0 - w)
                    }
                })
                .collect();
            let mask = p.mask().iter().zip(c.mask()).map(|(&a, &b)| a && b).collect();
            InvDepthFrame::new(p.width(), p.height(), values, mask)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowLog {
    pub ordinal: usize,
    pub key_indices: Vec<usize>,
    pub overlap_indices: Vec<usize>,
    pub future_indices: Vec<usize>,
    pub alignment: WindowAlignment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StitchOutput {
    pub video: InvClip,
    pub windows: Vec<WindowLog>,
}

pub fn infer_long<P, C: ClipPredictor<P> + ?Sized>(predictor: &mut C, frames: &[P], cfg: &StitchConfig) -> Result<StitchOutput> {
    infer_long_observed(predictor, frames, cfg, |_, _| Ok(()))
}

/// [`infer_long`] that hands every window's freshly written frames
/// (rewritten overlap, then future) to `observe` right after they commit.
pub fn infer_long_observed<P, C: ClipPredictor<P> + ?Sized>(
    predictor: &mut C,
    frames: &[P],
    cfg: &StitchConfig,
    mut observe: impl FnMut(&ClipSpec, &[(usize, &InvDepthFrame)]) -> Result<()>,
) -> Result<StitchOutput> {
    let plan = plan_windows(frames.len(), cfg)?;
    let mut committed: BTreeMap<usize, InvDepthFrame> = BTreeMap::new();
    let mut logs = Vec::with_capacity(plan.len());
    for spec in &plan {
        let inputs: Vec<&P> = spec.frame_indices().into_iter().map(|i| &frames[i]).collect();
        let cur = predictor.predict(spec, &inputs).map_err(|e| Error::Predictor {
            ordinal: spec.ordinal,
            source: Box::new(e),
        })?;
        if cur.len() != spec.len() {
            return Err(Error::Predictor {
                ordinal: spec.ordinal,
                source: Box::new(Error::shape(format!("returned {} frames for {}", cur.len(), spec.len()))),
            });
        }
        let mut alignment = WindowAlignment {
            map: AffineMap::IDENTITY,
            kind: FitKind::None,
            warnings: Vec::new(),
        };
        let n_reused = spec.key_indices.len() + spec.overlap_indices.len();
        let n_keys = spec.key_indices.len();
        let cur = if spec.ordinal > 0 && matches!(cfg.strategy, Strategy::Oa | Strategy::OiKr) {
            let (aligned, a) = align_window(&cur, &committed, spec)?;
            alignment = a;
            aligned
        } else {
            cur
        };
        let cur_frames = cur.into_frames();
        let mut written = Vec::new();
        if spec.ordinal > 0 && matches!(cfg.strategy, Strategy::Oi | Strategy::OiKr) {
            let prev: Vec<InvDepthFrame> = spec.overlap_indices.iter().map(|i| committed[i].clone()).collect();
            let blended = stitch_overlap(&prev, &cur_frames[n_keys..n_reused])?;
            for (&i, f) in spec.overlap_indices.iter().zip(blended) {
                committed.insert(i, f);
                written.push(i);
            }
        }
        for (&i, f) in spec.future_indices.iter().zip(&cur_frames[n_reused..]) {
            committed.insert(i, f.clone());
            written.push(i);
        }
        let fresh: Vec<(usize, &InvDepthFrame)> = written.iter().map(|&i| (i, &committed[&i])).collect();
        observe(spec, &fresh)?;
        logs.push(WindowLog {
            ordinal: spec.ordinal,
            key_indices: spec.key_indices.clone(),
            overlap_indices: spec.overlap_indices.clone(),
            future_indices: spec.future_indices.clone(),
            alignment,
        });
    }
    let video = InvClip::from_frames(committed.into_values().collect())?;
    Ok(StitchOutput { video, windows: logs })
}

/// Settings for the scale-drift simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSetup {
    pub windows: usize,
    pub trials: usize,
    pub width: usize,
    pub height: usize,
    /// Noise model; trial `j` uses seed `noise.seed + j`.
    pub noise: FlickerParams,
    pub scene_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyDrift {
    pub strategy: Strategy,
    /// Mean drift per window index over trials.
    pub mean: Vec<f64>,
    /// Final-window drift of every trial.
    pub final_drift: Vec<f64>,
    /// Least-squares slope of drift against window index, per trial.
    pub slope: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub setup: DriftSetup,
    pub strategies: Vec<StrategyDrift>,
}

impl DriftReport {
    pub fn get(&self, s: Strategy) -> &StrategyDrift {
        self.strategies.iter().find(|d| d.strategy == s).expect("all strategies are run")
    }
}

/// Least-squares scale of `pred` against ground truth over the given frames.
fn scale_vs_truth(fresh: &[(usize, &InvDepthFrame)], gt: &InvClip) -> Result<f64> {
    let pred: Vec<InvDepthFrame> = fresh.iter().map(|(_, f)| (*f).clone()).collect();
    let truth: Vec<InvDepthFrame> = fresh.iter().map(|(i, _)| gt.frames()[*i].clone()).collect();
    Ok(fit_shared(&truth, &pred)?.map.scale)
}

/// Runs one stitched inference and returns the log-scale drift of every
/// window relative to window 0. Window `k` is scored on the frames it wrote,
/// at the moment it wrote them.
pub fn window_drift<C: ClipPredictor<InvDepthFrame> + ?Sized>(predictor: &mut C, gt: &InvClip, cfg: &StitchConfig) -> Result<Vec<f64>> {
    let mut scales = Vec::new();
    infer_long_observed(predictor, gt.frames(), cfg, |_, fresh| {
        scales.push(scale_vs_truth(fresh, gt)?);
        Ok(())
    })?;
    let base = scales[0].ln();
    Ok(scales.iter().map(|s| (s.ln() - base).abs()).collect())
}

fn ols_slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, v) in y.iter().enumerate() {
        let dx = x as f64 - mx;
        sxy += dx * (v - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Runs every strategy on the same orbit ground truth with paired noise
/// draws. Each strategy gets a video exactly `windows` windows long.
pub fn drift_experiment(base: &StitchConfig, setup: &DriftSetup) -> Result<DriftReport> {
    if setup.windows < 2 {
        return Err(Error::config("drift experiment needs at least 2 windows"));
    }
    if setup.trials == 0 {
        return Err(Error::config("drift experiment needs at least 1 trial"));
    }
    let cfgs: Vec<StitchConfig> = Strategy::ALL.iter().map(|&strategy| StitchConfig { strategy, ..*base }).collect();
    for c in &cfgs {
        c.validate()?;
    }
    let longest = cfgs.iter().map(|c| c.frames_for_windows(setup.windows)).max().unwrap_or(0);
    let mut scene = SceneConfig::preset("orbit", longest, setup.width, setup.height, setup.scene_seed)?;
    // Small angular step keeps the long orbit slow.
    scene.trajectory = crate::synth::Trajectory::Orbit {
        radius: 5.0,
        angular_step: 0.005,
    };
    let gt = generate_scene(&scene)?.inverse()?;
    let mut strategies = Vec::new();
    for cfg in &cfgs {
        let len = cfg.frames_for_windows(setup.windows);
        let truth = InvClip::from_frames(gt.frames()[..len].to_vec())?;
        let mut sum = vec![0.0; setup.windows];
        let mut final_drift = Vec::with_capacity(setup.trials);
        let mut slope = Vec::with_capacity(setup.trials);
        for t in 0..setup.trials {
            let mut predictor = WindowedFlicker {
                params: FlickerParams {
                    seed: setup.noise.seed.wrapping_add(t as u64),
                    ..setup.noise
                },
            };
            let drift = window_drift(&mut predictor, &truth, cfg)?;
            for (s, d) in sum.iter_mut().zip(&drift) {
                *s += d;
            }
            final_drift.push(*drift.last().expect("at least two windows"));
            slope.push(ols_slope(&drift));
        }
        strategies.push(StrategyDrift {
            strategy: cfg.strategy,
            mean: sum.iter().map(|s| s / setup.trials as f64).collect(),
            final_drift,
            slope,
        });
    }
    Ok(DriftReport {
        setup: setup.clone(),
        strategies,
    })
}

/// One-sided 95% quantile of Student's t with `dof` degrees of freedom
/// (Cornish-Fisher expansion about the normal quantile).
pub fn t_quantile_95(dof: usize) -> f64 {
    let z: f64 = 1.644_853_626_951_472_2;
    let v = dof.max(1) as f64;
    z + (z.powi(3) + z) / (4.0 * v) + (5.0 * z.powi(5) + 16.0 * z.powi(3) + 3.0 * z) / (96.0 * v * v)
}

/// Upper end of the one-sided 95% confidence interval for the mean of `x`.
pub fn upper_bound_95(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    mean + t_quantile_95(x.len().saturating_sub(1)) * (var / n).sqrt()
}

/// Lower end of the one-sided 95% confidence interval for the mean of `x`.
pub fn lower_bound_95(x: &[f64]) -> f64 {
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    -upper_bound_95(&neg)
}

/// True when `a < b` in the mean, paired, at one-sided 95%.
pub fn paired_less(a: &[f64], b: &[f64]) -> bool {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    upper_bound_95(&d) < 0.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(strategy: Strategy) -> StitchConfig {
        StitchConfig {
            strategy,
            ..StitchConfig::default()
        }
    }

    #[test]
    fn plan_56_matches_hand_derivation() {
        let plan = plan_windows(56, &cfg(Strategy::OiKr)).unwrap();
        assert_eq!(plan.len(), 3);
        assert_eq!(plan[0].future_indices, (0..32).collect::<Vec<_>>());
        assert!(plan[0].key_indices.is_empty() && plan[0].overlap_indices.is_empty());
        assert_eq!(plan[1].overlap_indices, (24..32).collect::<Vec<_>>());
        assert_eq!(plan[1].key_indices, vec![0, 12]);
        assert_eq!(plan[1].future_indices, (32..54).collect::<Vec<_>>());
        assert_eq!(plan[2].overlap_indices, (46..54).collect::<Vec<_>>());
        assert_eq!(plan[2].key_indices, vec![22, 34]);
        assert_eq!(plan[2].future_indices, vec![54, 55]);
    }

    #[test]
    fn short_video_is_one_window() {
        for s in Strategy::ALL {
            let plan = plan_windows(20, &cfg(s)).unwrap();
            assert_eq!(plan.len(), 1);
            assert_eq!(plan[0].future_indices, (0..20).collect::<Vec<_>>());
        }
    }

    #[test]
    fn keys_clamp_and_dedup() {
        let c = StitchConfig {
            window: 8,
            overlap: 2,
            keyframes: 3,
            keyframe_stride: 4,
            strategy: Strategy::OiKr,
        };
        let plan = plan_windows(12, &c).unwrap();
        // first overlap index 6: keys 2, 0 (clamped from -2), 0 deduplicated
        assert_eq!(plan[1].key_indices, vec![0, 2]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = cfg(Strategy::Oi);
        c.overlap = 0;
        assert!(c.validate().is_err());
        c = cfg(Strategy::OiKr);
        c.overlap = 30;
        assert!(c.validate().is_err());
        c = cfg(Strategy::OiKr);
        c.keyframe_stride = 0;
        assert!(c.validate().is_err());
        let mut b = cfg(Strategy::Baseline);
        b.overlap = 0;
        assert!(b.validate().is_ok());
        assert!(plan_windows(0, &cfg(Strategy::Oa)).is_err());
    }

    #[test]
    fn overlap_weights() {
        assert_eq!(overlap_weight(1, 8), 1.0);
        assert_eq!(overlap_weight(8, 8), 0.0);
        assert!((overlap_weight(3, 8) - 5.0 / 7.0).abs() < 1e-15);
        assert_eq!(overlap_weight(1, 1), 1.0);
        let prev: Vec<_> = (0..8).map(|_| InvDepthFrame::constant(2, 2, 2.0).unwrap()).collect();
        let cur: Vec<_> = (0..8).map(|_| InvDepthFrame::constant(2, 2, 4.0).unwrap()).collect();
        let out = stitch_overlap(&prev, &cur).unwrap();
        assert!((out[2].get(0, 0) - 18.0 / 7.0).abs() < 1e-12);
    }

    fn clip(values: &[f64], timeline: Vec<usize>) -> InvClip {
        let frames = values
            .iter()
            .enumerate()
            .map(|(k, &v)| InvDepthFrame::from_fn(3, 2, |r, c| v + 0.1 * (r * 3 + c) as f64 + 0.01 * k as f64).unwrap())
            .collect();
        InvClip::new(frames, timeline).unwrap()
    }

    fn spec() -> ClipSpec {
        ClipSpec {
            ordinal: 1,
            key_indices: vec![0],
            overlap_indices: vec![2, 3],
            future_indices: vec![4, 5],
        }
    }

    #[test]
    fn align_window_cases() {
        let committed_clip = clip(&[1.0, 0.0, 1.5, 2.0], vec![0, 1, 2, 3]);
        let committed: BTreeMap<usize, InvDepthFrame> = committed_clip
            .timeline()
            .iter()
            .copied()
            .zip(committed_clip.frames().iter().cloned())
            .collect();
        let reused: Vec<InvDepthFrame> = [0, 2, 3].iter().map(|i| committed[i].clone()).collect();
        let mut frames = reused.clone();
        frames.push(InvDepthFrame::constant(3, 2, 0.5).unwrap());
        frames.push(InvDepthFrame::constant(3, 2, 0.7).unwrap());
        let cur = InvClip::new(frames.clone(), vec![0, 2, 3, 4, 5]).unwrap();
        let (_, a) = align_window(&cur, &committed, &spec()).unwrap();
        assert!((a.map.scale - 1.0).abs() < 1e-12 && a.map.shift.abs() < 1e-12);
        assert_eq!(a.kind, FitKind::ScaleShift);

        let doubled = apply_affine(&cur, AffineMap::new(2.0, 1.0)).unwrap();
        let (out, a) = align_window(&doubled, &committed, &spec()).unwrap();
        assert!((a.map.scale - 0.5).abs() < 1e-12 && (a.map.shift + 0.5).abs() < 1e-12);
        assert!((out.frames()[4].get(0, 0) - 0.7).abs() < 1e-12);

        let flat: Vec<_> = (0..5).map(|_| InvDepthFrame::constant(3, 2, 3.0).unwrap()).collect();
        let flat = InvClip::new(flat, vec![0, 2, 3, 4, 5]).unwrap();
        let (_, a) = align_window(&flat, &committed, &spec()).unwrap();
        assert_eq!(a.kind, FitKind::ShiftOnly);
        assert_eq!(a.map.scale, 1.0);
        assert_eq!(a.warnings.len(), 1);
    }

    fn ramp_video(n: usize) -> Vec<InvDepthFrame> {
        (0..n)
            .map(|k| InvDepthFrame::from_fn(4, 3, |r, c| 0.2 + 0.05 * (r * 4 + c) as f64 + 0.003 * k as f64).unwrap())
            .collect()
    }

    #[test]
    fn perfect_predictor_reproduces_input() {
        let video = ramp_video(100);
        for s in Strategy::ALL {
            let out = infer_long(&mut PassThrough, &video, &cfg(s)).unwrap();
            assert_eq!(out.video.frames(), &video[..], "{}", s.label());
        }
    }

    #[test]
    fn single_window_identical_across_strategies() {
        let video = ramp_video(20);
        let params = FlickerParams {
            sigma_window_scale: 0.1,
            sigma_pixel: 0.01,
            seed: 5,
            ..FlickerParams::default()
        };
        let outs: Vec<_> = Strategy::ALL
            .iter()
            .map(|&s| infer_long(&mut WindowedFlicker { params }, &video, &cfg(s)).unwrap().video)
            .collect();
        assert!(outs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn predictor_errors_carry_ordinal() {
        let video = ramp_video(40);
        let mut first = |spec: &ClipSpec, f: &[&InvDepthFrame]| -> Result<InvClip> {
            if spec.ordinal == 1 {
                Err(Error::InvalidValue("boom".into()))
            } else {
                PassThrough.predict(spec, f)
            }
        };
        match infer_long(&mut first, &video, &cfg(Strategy::Oi)) {
            Err(Error::Predictor { ordinal: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn t_quantiles() {
        // Reference values of Student's t, one-sided 95%.
        assert!((t_quantile_95(19) - 1.729).abs() < 2e-3);
        assert!((t_quantile_95(99) - 1.660).abs() < 1e-3);
        assert!((t_quantile_95(1_000_000) - 1.6449).abs() < 1e-4);
    }

    #[test]
    fn zero_noise_has_zero_drift() {
        let setup = DriftSetup {
            windows: 3,
            trials: 2,
            width: 6,
            height: 6,
            noise: FlickerParams::default(),
            scene_seed: 0,
        };
        let report = drift_experiment(&StitchConfig::default(), &setup).unwrap();
        for s in &report.strategies {
            assert!(s.final_drift.iter().all(|d| d.abs() < 1e-9), "{:?}", s);
        }
    }
}
