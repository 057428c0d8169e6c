//! Training of the refiner: synthetic data stream, AdamW with cosine decay,
//! global-norm clipping, and held-out evaluation.
//!
//! Parameters and optimizer moments are rounded to f32 after every step so a
//! checkpoint stores the exact state and resuming reproduces the run bitwise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{init_params, Refiner, RefinerConfig, RefinerParams};
use crate::error::{Error, Result};
use crate::frame::{FlowField, InvClip};
use crate::losses::{variant_loss, LossVariant, LossWeights, TgmThreshold};
use crate::metrics::{evaluate_video, Cameras};
use crate::synth::{all_flows, flicker_predictor, generate_scene, stream_rng, FlickerParams, SceneConfig, SyntheticSequence, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub tau: f64,
    pub variant: LossVariant,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 1,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            weights: LossWeights::default(),
            tau: TgmThreshold::default().tau,
            variant: LossVariant::TgmSsi,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be at least 1"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("gradient clip norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("moment decay rates must lie in [0, 1)"));
        }
        TgmThreshold::new(self.tau)?;
        Ok(())
    }

    /// Cosine decay from `lr` at step 0 towards 0 at `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps == 0 {
            return self.lr;
        }
        let frac = step as f64 / self.steps as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Synthetic clip stream: random scene, flickered by the per-frame oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub scenes: Vec<String>,
    pub flicker: FlickerParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            frames: 16,
            scenes: vec!["forward".into(), "orbit".into(), "handheld".into()],
            flicker: FlickerParams {
                sigma_scale: 0.1,
                sigma_shift: 0.02,
                sigma_pixel: 0.002,
                ..FlickerParams::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub noisy: InvClip,
    pub gt: InvClip,
    pub flows: Option<Vec<FlowField>>,
    pub sequence: SyntheticSequence,
}

const HELDOUT: u64 = 1 << 63;

fn build_sample(data: &DataConfig, seed: u64, stream: u64, with_flow: bool) -> Result<Sample> {
    if data.scenes.is_empty() {
        return Err(Error::config("no training scenes configured"));
    }
    let mut rng = stream_rng(seed, stream);
    for _ in 0..16 {
        let name = &data.scenes[rng.random_range(0..data.scenes.len())];
        let mut scene = SceneConfig::preset(name, data.frames, data.width, data.height, rng.random())?;
        scene.trajectory = match scene.trajectory {
            Trajectory::Forward { .. } => Trajectory::Forward {
                speed: rng.random_range(0.05..0.2),
            },
            Trajectory::Orbit { radius, .. } => Trajectory::Orbit {
                radius,
                angular_step: rng.random_range(0.01..0.04) * if rng.random::<bool>() { 1.0 } else { -1.0 },
            },
            t => t,
        };
        let flicker_seed = rng.random();
        let sequence = match generate_scene(&scene) {
            Ok(s) => s,
            Err(Error::Collision { .. }) => continue,
            Err(e) => return Err(e),
        };
        let gt = sequence.inverse()?;
        let noisy = flicker_predictor(
            &gt,
            &FlickerParams {
                seed: flicker_seed,
                ..data.flicker
            },
        )?;
        let flows = if with_flow { Some(all_flows(&sequence)?) } else { None };
        return Ok(Sample {
            noisy,
            gt,
            flows,
            sequence,
        });
    }
    Err(Error::config("could not draw a collision-free scene"))
}

/// Training sample `index` of the stream keyed by `seed`.
pub fn training_sample(data: &DataConfig, seed: u64, index: u64, with_flow: bool) -> Result<Sample> {
    build_sample(data, seed, index, with_flow)
}

/// Held-out sample `index`, disjoint from every training stream index.
pub fn heldout_sample(data: &DataConfig, seed: u64, index: u64) -> Result<Sample> {
    build_sample(data, seed, HELDOUT | index, false)
}

/// Parameters plus AdamW moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: RefinerParams,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Steps completed.
    pub step: usize,
}

impl TrainState {
    pub fn new(cfg: &RefinerConfig) -> Result<Self> {
        let params = init_params(cfg)?;
        let n = params.len();
        Ok(Self {
            params,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        })
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    /// Unweighted temporal term of the objective.
    pub temporal: f64,
    pub ssi: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

fn round_f32(x: &mut [f64]) {
    for v in x {
        *v = *v as f32 as f64;
    }
}

/// Runs one optimizer step. On a non-finite loss or gradient the state is
/// left untouched and [`Error::NonFinite`] is returned.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, data: &DataConfig) -> Result<StepRecord> {
    let t = state.step;
    let n = state.params.len();
    let mut grad = vec![0.0; n];
    let (mut total, mut temporal, mut ssi) = (0.0, 0.0, 0.0);
    let thresh = TgmThreshold::new(cfg.tau)?;
    let inv_b = 1.0 / cfg.batch as f64;
    for b in 0..cfg.batch {
        let sample = training_sample(data, cfg.seed, (t * cfg.batch + b) as u64, cfg.variant.needs_flow())?;
        let refiner = Refiner::new(&state.params);
        let (pred, cache) = refiner.forward_cached(&sample.noisy)?;
        let obj = variant_loss(cfg.variant, &pred, &sample.gt, sample.flows.as_deref(), cfg.weights, thresh)?;
        if !obj.total.value.is_finite() {
            return Err(Error::NonFinite { step: t });
        }
        let g = refiner.backward(&cache, &obj.total.grad)?;
        for (a, b) in grad.iter_mut().zip(&g.params) {
            *a += inv_b * b;
        }
        total += inv_b * obj.total.value;
        temporal += inv_b * obj.temporal;
        ssi += inv_b * obj.ssi;
    }
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite { step: t });
    }
    if grad_norm > cfg.grad_clip {
        let k = cfg.grad_clip / grad_norm;
        for g in grad.iter_mut() {
            *g *= k;
        }
    }
    let lr = cfg.lr_at(t);
    let k = (t + 1) as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(k), 1.0 - cfg.beta2.powi(k));
    let mut params = state.params.values.clone();
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    for i in 0..n {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        params[i] -= lr * (update + cfg.weight_decay * params[i]);
    }
    round_f32(&mut params);
    round_f32(&mut m);
    round_f32(&mut v);
    // f32 rounding turns overflow into infinities; refuse to commit them.
    if params.iter().chain(&m).chain(&v).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { step: t });
    }
    state.params.values = params;
    state.m = m;
    state.v = v;
    state.step += 1;
    Ok(StepRecord {
        step: t,
        total,
        temporal,
        ssi,
        grad_norm,
        lr,
    })
}

/// Trains until `min(until, cfg.steps)` steps are complete, reporting every
/// record to `on_step`.
pub fn train_refiner(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &DataConfig,
    until: usize,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let stop = until.min(cfg.steps);
    let mut history = Vec::with_capacity(stop.saturating_sub(state.step));
    while state.step < stop {
        let rec = train_step(state, cfg, data)?;
        on_step(&rec)?;
        if rec.step % 100 == 0 {
            log::info!(
                "step {} total {:.5} temporal {:.5} ssi {:.5} |g| {:.3} lr {:.2e}",
                rec.step,
                rec.total,
                rec.temporal,
                rec.ssi,
                rec.grad_norm,
                rec.lr
            );
        }
        history.push(rec);
    }
    Ok(history)
}

/// Mean held-out scores of the raw flickered input and the refined output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutReport {
    pub clips: usize,
    pub input_tae: f64,
    pub refined_tae: f64,
    pub input_absrel: f64,
    pub refined_absrel: f64,
    pub input_delta1: f64,
    pub refined_delta1: f64,
    pub input_tgm: f64,
    pub refined_tgm: f64,
}

pub fn evaluate_heldout(params: &RefinerParams, data: &DataConfig, seed: u64, clips: usize) -> Result<HeldOutReport> {
    if clips == 0 {
        return Err(Error::config("held-out evaluation needs at least one clip"));
    }
    let refiner = Refiner::new(params);
    let mut acc = [0.0; 8];
    let thresh = TgmThreshold::default();
    let weights = LossWeights { alpha: 1.0, beta: 0.0 };
    for j in 0..clips {
        let s = heldout_sample(data, seed, j as u64)?;
        let refined = refiner.forward(&s.noisy)?;
        let cams = Cameras {
            poses: &s.sequence.poses,
            intrinsics: &s.sequence.intrinsics,
        };
        let depth = s.sequence.depth.frames();
        let a = evaluate_video(&s.noisy, depth, Some(cams))?;
        let b = evaluate_video(&refined, depth, Some(cams))?;
        let tgm = |p: &InvClip| -> Result<f64> { Ok(variant_loss(LossVariant::TgmSsi, p, &s.gt, None, weights, thresh)?.temporal) };
        let vals = [
            a.tae.unwrap_or(f64::NAN),
            b.tae.unwrap_or(f64::NAN),
            a.absrel,
            b.absrel,
            a.delta1,
            b.delta1,
            tgm(&s.noisy)?,
            tgm(&refined)?,
        ];
        for (x, v) in acc.iter_mut().zip(vals) {
            *x += v / clips as f64;
        }
    }
    Ok(HeldOutReport {
        clips,
        input_tae: acc[0],
        refined_tae: acc[1],
        input_absrel: acc[2],
        refined_absrel: acc[3],
        input_delta1: acc[4],
        refined_delta1: acc[5],
        input_tgm: acc[6],
        refined_tgm: acc[7],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (RefinerConfig, TrainConfig, DataConfig) {
        let rc = RefinerConfig {
            clip_len: 4,
            channels: 8,
            heads: 2,
            layers: 1,
            ffn_expansion: 2,
            patch: 4,
            seed: 1,
            residual_output: true,
        };
        let tc = TrainConfig {
            steps: 6,
            lr: 1e-3,
            batch: 2,
            ..TrainConfig::default()
        };
        let dc = DataConfig {
            width: 16,
            height: 16,
            frames: 4,
            ..DataConfig::default()
        };
        (rc, tc, dc)
    }

    #[test]
    fn zero_steps_keep_init() {
        let (rc, mut tc, dc) = tiny();
        tc.steps = 0;
        let mut st = TrainState::new(&rc).unwrap();
        let hist = train_refiner(&mut st, &tc, &dc, usize::MAX, |_| Ok(())).unwrap();
        assert!(hist.is_empty());
        assert_eq!(st.params, init_params(&rc).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (rc, tc, dc) = tiny();
        let mut a = TrainState::new(&rc).unwrap();
        let full = train_refiner(&mut a, &tc, &dc, usize::MAX, |_| Ok(())).unwrap();
        let mut b = TrainState::new(&rc).unwrap();
        let mut part = train_refiner(&mut b, &tc, &dc, 3, |_| Ok(())).unwrap();
        let mut resumed = b.clone();
        part.extend(train_refiner(&mut resumed, &tc, &dc, usize::MAX, |_| Ok(())).unwrap());
        assert_eq!(full, part);
        assert_eq!(a, resumed);
        assert_ne!(a.params, init_params(&rc).unwrap());
    }

    #[test]
    fn cosine_schedule() {
        let tc = TrainConfig::default();
        assert_eq!(tc.lr_at(0), 1e-4);
        assert!((tc.lr_at(1000) - 5e-5).abs() < 1e-15);
        assert!(tc.lr_at(1999) < 1e-9);
    }

    #[test]
    fn flow_variants_train() {
        let (rc, mut tc, dc) = tiny();
        tc.steps = 1;
        tc.variant = LossVariant::OpwSsi;
        let mut st = TrainState::new(&rc).unwrap();
        let rec = train_step(&mut st, &tc, &dc).unwrap();
        assert!(rec.total.is_finite() && rec.grad_norm > 0.0);
    }

    #[test]
    fn samples_are_keyed_by_index() {
        let dc = tiny().2;
        let a = training_sample(&dc, 1, 5, false).unwrap();
        let b = training_sample(&dc, 1, 5, false).unwrap();
        let c = heldout_sample(&dc, 1, 5).unwrap();
        assert_eq!(a.noisy, b.noisy);
        assert_ne!(a.noisy, c.noisy);
    }
}
