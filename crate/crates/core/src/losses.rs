//! Video depth losses with analytic gradients.
//!
//! All losses take predictions and ground truth in inverse depth. Where a
//! loss works on normalized depth, `d` and `g` are the median/MAD normalized
//! prediction and ground truth, each normalized once over the whole clip.
//! Gradients are exact, including the dependence of the median and MAD on
//! the prediction.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{fit_shared, SsiNormalization};
use crate::error::{Error, Result};
use crate::frame::{FlowField, InvClip, InvDepthFrame};

/// Number of dyadic scales in the spatial gradient-matching term.
pub const GRADIENT_SCALES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// `d loss / d prediction`, one raster per frame; zero at invalid pixels.
    pub grad: Vec<Vec<f64>>,
    /// Elements that contributed after masking and thresholding.
    pub active_count: usize,
    pub warning: Option<String>,
}

impl LossResult {
    fn zeros_like(clip: &InvClip) -> Self {
        Self {
            value: 0.0,
            grad: clip.frames().iter().map(|f| vec![0.0; f.len()]).collect(),
            active_count: 0,
            warning: None,
        }
    }

    /// `a * self + b * other`; warnings are concatenated.
    pub fn combine(&self, a: f64, other: &LossResult, b: f64) -> LossResult {
        let grad = self
            .grad
            .iter()
            .zip(&other.grad)
            .map(|(x, y)| x.iter().zip(y).map(|(u, v)| a * u + b * v).collect())
            .collect();
        let warning = match (&self.warning, &other.warning) {
            (Some(x), Some(y)) => Some(format!("{x}; {y}")),
            (x, y) => x.clone().or_else(|| y.clone()),
        };
        LossResult {
            value: a * self.value + b * other.value,
            grad,
            active_count: self.active_count + other.active_count,
            warning,
        }
    }

    pub fn scaled(&self, a: f64) -> LossResult {
        LossResult {
            value: a * self.value,
            grad: self.grad.iter().map(|g| g.iter().map(|v| a * v).collect()).collect(),
            active_count: self.active_count,
            warning: self.warning.clone(),
        }
    }
}

/// `alpha` weighs the temporal term, `beta` the single-frame SSI term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 10.0, beta: 1.0 }
    }
}

/// Temporal changes of normalized ground truth at or above `tau` are excluded
/// from the TGM loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TgmThreshold {
    pub tau: f64,
}

impl Default for TgmThreshold {
    fn default() -> Self {
        Self { tau: 0.05 }
    }
}

impl TgmThreshold {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::config(format!("TGM threshold must be positive, got {tau}")));
        }
        Ok(Self { tau })
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

fn check_same_shape(a: &InvClip, b: &InvClip) -> Result<()> {
    if a.len() != b.len() || a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "{} frames of {:?} vs {} frames of {:?}",
            a.len(),
            a.dims(),
            b.len(),
            b.dims()
        )));
    }
    Ok(())
}

fn check_flows(clip: &InvClip, flows: &[FlowField]) -> Result<()> {
    if clip.len() < 2 {
        return Err(Error::shape("temporal losses need at least two frames"));
    }
    if flows.len() != clip.len() - 1 {
        return Err(Error::shape(format!("{} flow fields for {} frames", flows.len(), clip.len())));
    }
    let (w, h) = clip.dims();
    if flows.iter().any(|f| f.width != w || f.height != h) {
        return Err(Error::shape("flow dimensions differ from the clip"));
    }
    Ok(())
}

fn clip_from_normalized(clip: &InvClip, norm: &SsiNormalization) -> Result<InvClip> {
    InvClip::new(norm.to_frames(clip.frames())?, clip.timeline().to_vec())
}

fn pull_back(pred: &InvClip, norm: &SsiNormalization, mut res: LossResult) -> LossResult {
    res.grad = norm.backward(pred.frames(), &res.grad);
    res
}

/// Bilinear taps at continuous pixel position `(x, y)` = (col, row).
/// `None` outside `[0, w-1] × [0, h-1]`. Zero-weight taps are dropped.
pub(crate) fn bilinear_taps(w: usize, h: usize, x: f64, y: f64) -> Option<([(usize, f64); 4], usize)> {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let candidates = [
        (y0 * w + x0, (1.0 - tx) * (1.0 - ty)),
        (y0 * w + x1, tx * (1.0 - ty)),
        (y1 * w + x0, (1.0 - tx) * ty),
        (y1 * w + x1, tx * ty),
    ];
    let mut taps = [(0usize, 0.0f64); 4];
    let mut n = 0;
    for (i, wgt) in candidates {
        if wgt != 0.0 {
            taps[n] = (i, wgt);
            n += 1;
        }
    }
    Some((taps, n))
}

fn sample_taps(taps: &[(usize, f64)], values: &[f64], mask: &[bool]) -> Option<f64> {
    let mut acc = 0.0;
    for &(i, w) in taps {
        if !mask[i] {
            return None;
        }
        acc += w * values[i];
    }
    Some(acc)
}

/// Single-frame scale/shift-invariant loss: mean |d − g| plus multi-scale
/// gradient matching of the residual `d − g`, averaged over frames.
pub fn ssi_loss(pred: &InvClip, gt: &InvClip) -> Result<LossResult> {
    check_same_shape(pred, gt)?;
    let np = SsiNormalization::new(pred.frames())?;
    let ng = SsiNormalization::new(gt.frames())?;
    let d = clip_from_normalized(pred, &np)?;
    let g = clip_from_normalized(gt, &ng)?;
    let res = ssi_normalized(&d, &g)?;
    Ok(pull_back(pred, &np, res))
}

/// SSI loss on already-normalized clips; the gradient is with respect to `d`.
pub fn ssi_normalized(d: &InvClip, g: &InvClip) -> Result<LossResult> {
    check_same_shape(d, g)?;
    let (w, h) = d.dims();
    let mut out = LossResult::zeros_like(d);
    let mut frames_used = 0usize;
    let mut frame_values = Vec::with_capacity(d.len());
    for (f, (df, gf)) in d.frames().iter().zip(g.frames()).enumerate() {
        let joint: Vec<bool> = df.mask().iter().zip(gf.mask()).map(|(&a, &b)| a && b).collect();
        let count = joint.iter().filter(|&&m| m).count();
        if count == 0 {
            frame_values.push(None);
            continue;
        }
        frames_used += 1;
        let residual: Vec<f64> = df.values().iter().zip(gf.values()).map(|(a, b)| a - b).collect();
        let grad = &mut out.grad[f];
        let mut value = 0.0;
        let inv = 1.0 / count as f64;
        for i in 0..residual.len() {
            if joint[i] {
                value += residual[i].abs() * inv;
                grad[i] += sign(residual[i]) * inv;
            }
        }
        out.active_count += count;
        for scale in 0..GRADIENT_SCALES {
            let step = 1usize << scale;
            value += gradient_matching(&residual, &joint, w, h, step, grad);
        }
        frame_values.push(Some(value));
    }
    if frames_used == 0 {
        return Err(Error::DegenerateFit("no joint valid pixels in any frame".into()));
    }
    let inv_frames = 1.0 / frames_used as f64;
    out.value = frame_values.iter().flatten().sum::<f64>() * inv_frames;
    for g in &mut out.grad {
        for v in g.iter_mut() {
            *v *= inv_frames;
        }
    }
    Ok(out)
}

/// Mean |∂x R| + mean |∂y R| on the grid subsampled by `step`; accumulates the
/// gradient into `grad`.
fn gradient_matching(residual: &[f64], joint: &[bool], w: usize, h: usize, step: usize, grad: &mut [f64]) -> f64 {
    let mut x_pairs = Vec::new();
    let mut y_pairs = Vec::new();
    for r in (0..h).step_by(step) {
        for c in (0..w).step_by(step) {
            let i = r * w + c;
            if !joint[i] {
                continue;
            }
            if c + step < w && joint[i + step] {
                x_pairs.push((i, i + step));
            }
            if r + step < h && joint[i + step * w] {
                y_pairs.push((i, i + step * w));
            }
        }
    }
    let mut value = 0.0;
    for pairs in [&x_pairs, &y_pairs] {
        if pairs.is_empty() {
            continue;
        }
        let inv = 1.0 / pairs.len() as f64;
        for &(a, b) in pairs.iter() {
            let diff = residual[b] - residual[a];
            value += diff.abs() * inv;
            let s = sign(diff) * inv;
            grad[b] += s;
            grad[a] -= s;
        }
    }
    value
}

/// Flow-warping loss on raw predictions: frame `i + 1` is bilinearly
/// sampled at `(u, v) + flow_i(u, v)` and compared with frame `i` in ℓ1.
pub fn opw_loss(pred: &InvClip, flows: &[FlowField]) -> Result<LossResult> {
    check_flows(pred, flows)?;
    let (w, h) = pred.dims();
    let pairs = pred.len() - 1;
    let mut out = LossResult::zeros_like(pred);
    let frames = pred.frames();
    for (i, flow) in flows.iter().enumerate() {
        let (cur, next) = (&frames[i], &frames[i + 1]);
        let mut terms = Vec::new();
        for j in 0..w * h {
            if !(flow.mask[j] && cur.mask()[j]) {
                continue;
            }
            let (r, c) = (j / w, j % w);
            let [du, dv] = flow.vectors[j];
            let Some((taps, n)) = bilinear_taps(w, h, c as f64 + du, r as f64 + dv) else {
                continue;
            };
            let Some(warped) = sample_taps(&taps[..n], next.values(), next.mask()) else {
                continue;
            };
            terms.push((j, taps, n, cur.values()[j] - warped));
        }
        if terms.is_empty() {
            continue;
        }
        let inv = 1.0 / (terms.len() as f64 * pairs as f64);
        for (j, taps, n, diff) in &terms {
            out.value += diff.abs() * inv;
            let s = sign(*diff) * inv;
            out.grad[i][*j] += s;
            for &(t, wgt) in &taps[..*n] {
                out.grad[i + 1][t] -= s * wgt;
            }
        }
        out.active_count += terms.len();
    }
    if out.active_count == 0 {
        return Err(Error::EmptyCorrespondence);
    }
    Ok(out)
}

/// Stable-error loss: mismatch between predicted and ground-truth temporal
/// changes at flow-corresponded pixels.
pub fn se_loss(pred: &InvClip, gt: &InvClip, flows: &[FlowField]) -> Result<LossResult> {
    check_same_shape(pred, gt)?;
    check_flows(pred, flows)?;
    let np = SsiNormalization::new(pred.frames())?;
    let ng = SsiNormalization::new(gt.frames())?;
    let d = clip_from_normalized(pred, &np)?;
    let g = clip_from_normalized(gt, &ng)?;
    let res = se_normalized(&d, &g, flows)?;
    Ok(pull_back(pred, &np, res))
}

/// Stable-error loss on already-normalized clips; gradient with respect to `d`.
pub fn se_normalized(d: &InvClip, g: &InvClip, flows: &[FlowField]) -> Result<LossResult> {
    check_same_shape(d, g)?;
    check_flows(d, flows)?;
    let (w, h) = d.dims();
    let pairs = d.len() - 1;
    let mut out = LossResult::zeros_like(d);
    let (df, gf) = (d.frames(), g.frames());
    for (i, flow) in flows.iter().enumerate() {
        let mut terms = Vec::new();
        for j in 0..w * h {
            if !(flow.mask[j] && df[i].mask()[j] && gf[i].mask()[j]) {
                continue;
            }
            let (r, c) = (j / w, j % w);
            let [du, dv] = flow.vectors[j];
            let Some((taps, n)) = bilinear_taps(w, h, c as f64 + du, r as f64 + dv) else {
                continue;
            };
            let (Some(dw), Some(gw)) = (
                sample_taps(&taps[..n], df[i + 1].values(), df[i + 1].mask()),
                sample_taps(&taps[..n], gf[i + 1].values(), gf[i + 1].mask()),
            ) else {
                continue;
            };
            let ed = dw - df[i].values()[j];
            let eg = gw - gf[i].values()[j];
            terms.push((j, taps, n, ed, eg));
        }
        if terms.is_empty() {
            continue;
        }
        let inv = 1.0 / (terms.len() as f64 * pairs as f64);
        for (j, taps, n, ed, eg) in &terms {
            let m = ed.abs() - eg.abs();
            out.value += m.abs() * inv;
            let s = sign(m) * sign(*ed) * inv;
            out.grad[i][*j] -= s;
            for &(t, wgt) in &taps[..*n] {
                out.grad[i + 1][t] += s * wgt;
            }
        }
        out.active_count += terms.len();
    }
    if out.active_count == 0 {
        return Err(Error::EmptyCorrespondence);
    }
    Ok(out)
}

/// Temporal gradient matching: compares |d_{i+1} − d_i| with
/// |g_{i+1} − g_i| at identical pixels, skipping pixels whose ground-truth
/// change is at or above the threshold.
pub fn tgm_loss(pred: &InvClip, gt: &InvClip, thresh: TgmThreshold) -> Result<LossResult> {
    check_same_shape(pred, gt)?;
    if pred.len() < 2 {
        return Err(Error::shape("temporal losses need at least two frames"));
    }
    let np = SsiNormalization::new(pred.frames())?;
    let ng = SsiNormalization::new(gt.frames())?;
    let d = clip_from_normalized(pred, &np)?;
    let g = clip_from_normalized(gt, &ng)?;
    let res = tgm_normalized(&d, &g, thresh)?;
    Ok(pull_back(pred, &np, res))
}

/// TGM on already-normalized clips; gradient with respect to `d`.
///
/// A threshold that masks every element is not an error: the result is 0
/// with `active_count == 0` and a warning.
pub fn tgm_normalized(d: &InvClip, g: &InvClip, thresh: TgmThreshold) -> Result<LossResult> {
    check_same_shape(d, g)?;
    if d.len() < 2 {
        return Err(Error::shape("temporal losses need at least two frames"));
    }
    let pairs = d.len() - 1;
    let mut out = LossResult::zeros_like(d);
    let (df, gf) = (d.frames(), g.frames());
    for i in 0..pairs {
        let (d0, d1, g0, g1) = (&df[i], &df[i + 1], &gf[i], &gf[i + 1]);
        let mut terms = Vec::new();
        for j in 0..d0.len() {
            if !(d0.mask()[j] && d1.mask()[j] && g0.mask()[j] && g1.mask()[j]) {
                continue;
            }
            let dg = g1.values()[j] - g0.values()[j];
            if dg.abs() >= thresh.tau {
                continue;
            }
            let dd = d1.values()[j] - d0.values()[j];
            terms.push((j, dd, dg));
        }
        if terms.is_empty() {
            continue;
        }
        let inv = 1.0 / (terms.len() as f64 * pairs as f64);
        for &(j, dd, dg) in &terms {
            let m = dd.abs() - dg.abs();
            out.value += m.abs() * inv;
            let s = sign(m) * sign(dd) * inv;
            out.grad[i + 1][j] += s;
            out.grad[i][j] -= s;
        }
        out.active_count += terms.len();
    }
    if out.active_count == 0 {
        out.warning = Some(format!("TGM threshold {} excluded every element; loss set to 0", thresh.tau));
    }
    Ok(out)
}

/// `alpha * tgm + beta * ssi`.
pub fn total_loss(pred: &InvClip, gt: &InvClip, weights: LossWeights, thresh: TgmThreshold) -> Result<LossResult> {
    Ok(total_loss_parts(pred, gt, weights, thresh)?.total)
}

/// Total loss together with its unweighted components.
#[derive(Debug, Clone)]
pub struct TotalParts {
    pub total: LossResult,
    pub tgm: f64,
    pub ssi: f64,
}

pub fn total_loss_parts(pred: &InvClip, gt: &InvClip, weights: LossWeights, thresh: TgmThreshold) -> Result<TotalParts> {
    check_same_shape(pred, gt)?;
    let np = SsiNormalization::new(pred.frames())?;
    let ng = SsiNormalization::new(gt.frames())?;
    let d = clip_from_normalized(pred, &np)?;
    let g = clip_from_normalized(gt, &ng)?;
    let ssi = ssi_normalized(&d, &g)?;
    let tgm = if pred.len() >= 2 {
        tgm_normalized(&d, &g, thresh)?
    } else {
        LossResult::zeros_like(&d)
    };
    let combined = tgm.combine(weights.alpha, &ssi, weights.beta);
    Ok(TotalParts {
        total: pull_back(pred, &np, combined),
        tgm: tgm.value,
        ssi: ssi.value,
    })
}

/// Fits one shared scale/shift from prediction to ground truth over the whole
/// clip, then takes the mean ℓ1 residual. The gradient accounts for the
/// dependence of the fitted map on the prediction.
pub fn video_align_loss(pred: &InvClip, gt: &InvClip) -> Result<LossResult> {
    check_same_shape(pred, gt)?;
    let fit = fit_shared(pred.frames(), gt.frames())?;
    let (s, t) = (fit.map.scale, fit.map.shift);
    let joint: Vec<Vec<bool>> = pred
        .frames()
        .iter()
        .zip(gt.frames())
        .map(|(p, g)| p.mask().iter().zip(g.mask()).map(|(&a, &b)| a && b).collect())
        .collect();
    let n = fit.count as f64;
    let (mut sp, mut sg) = (0.0, 0.0);
    let each = |f: &mut dyn FnMut(f64, f64)| {
        for ((p, g), m) in pred.frames().iter().zip(gt.frames()).zip(&joint) {
            for i in 0..p.len() {
                if m[i] {
                    f(p.values()[i], g.values()[i]);
                }
            }
        }
    };
    each(&mut |p, g| {
        sp += p;
        sg += g;
    });
    let (mp, mg) = (sp / n, sg / n);
    let (mut var, mut value, mut sum_sign, mut sum_sign_p) = (0.0, 0.0, 0.0, 0.0);
    each(&mut |p, g| {
        var += (p - mp) * (p - mp);
        let r = s * p + t - g;
        value += r.abs();
        sum_sign += sign(r);
        sum_sign_p += sign(r) * p;
    });
    let mut out = LossResult::zeros_like(pred);
    out.value = value / n;
    out.active_count = fit.count;
    for (f, ((p, g), m)) in pred.frames().iter().zip(gt.frames()).zip(&joint).enumerate() {
        for i in 0..p.len() {
            if !m[i] {
                continue;
            }
            let (pv, gv) = (p.values()[i], g.values()[i]);
            let ds = ((gv - mg) - 2.0 * s * (pv - mp)) / var;
            let dt = -ds * mp - s / n;
            let r = s * pv + t - gv;
            out.grad[f][i] = (sign(r) * s + sum_sign_p * ds + sum_sign * dt) / n;
        }
    }
    Ok(out)
}

/// Training objectives compared in the loss ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    /// Shared-alignment ℓ1 only.
    VideoAlign,
    /// `video_align + beta * ssi`.
    VideoAlignSsi,
    /// `alpha * opw + beta * ssi`.
    OpwSsi,
    /// `alpha * se + beta * ssi`.
    SeSsi,
    /// `alpha * tgm + beta * ssi`.
    TgmSsi,
}

impl LossVariant {
    pub const ALL: [LossVariant; 5] = [
        LossVariant::VideoAlign,
        LossVariant::VideoAlignSsi,
        LossVariant::OpwSsi,
        LossVariant::SeSsi,
        LossVariant::TgmSsi,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            LossVariant::VideoAlign => "videoalign",
            LossVariant::VideoAlignSsi => "videoalign+ssi",
            LossVariant::OpwSsi => "opw+ssi",
            LossVariant::SeSsi => "se+ssi",
            LossVariant::TgmSsi => "tgm+ssi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.label() == s)
    }

    pub fn needs_flow(&self) -> bool {
        matches!(self, LossVariant::OpwSsi | LossVariant::SeSsi)
    }
}

/// Value of a training objective with its temporal and SSI components.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: LossResult,
    /// Unweighted temporal (or video-align) term.
    pub temporal: f64,
    /// Unweighted SSI term, 0 when the variant has none.
    pub ssi: f64,
}

pub fn variant_loss(
    variant: LossVariant,
    pred: &InvClip,
    gt: &InvClip,
    flows: Option<&[FlowField]>,
    weights: LossWeights,
    thresh: TgmThreshold,
) -> Result<Objective> {
    let need_flow = || flows.ok_or_else(|| Error::config(format!("{} needs optical flow", variant.label())));
    match variant {
        LossVariant::TgmSsi => {
            let parts = total_loss_parts(pred, gt, weights, thresh)?;
            Ok(Objective {
                total: parts.total,
                temporal: parts.tgm,
                ssi: parts.ssi,
            })
        }
        LossVariant::VideoAlign => {
            let va = video_align_loss(pred, gt)?;
            Ok(Objective {
                temporal: va.value,
                ssi: 0.0,
                total: va,
            })
        }
        LossVariant::VideoAlignSsi => {
            let va = video_align_loss(pred, gt)?;
            let ssi = ssi_loss(pred, gt)?;
            Ok(Objective {
                temporal: va.value,
                ssi: ssi.value,
                total: va.combine(1.0, &ssi, weights.beta),
            })
        }
        LossVariant::OpwSsi => {
            let opw = opw_loss(pred, need_flow()?)?;
            let ssi = ssi_loss(pred, gt)?;
            Ok(Objective {
                temporal: opw.value,
                ssi: ssi.value,
                total: opw.combine(weights.alpha, &ssi, weights.beta),
            })
        }
        LossVariant::SeSsi => {
            let se = se_loss(pred, gt, need_flow()?)?;
            let ssi = ssi_loss(pred, gt)?;
            Ok(Objective {
                temporal: se.value,
                ssi: ssi.value,
                total: se.combine(weights.alpha, &ssi, weights.beta),
            })
        }
    }
}

/// Settings for [`finite_diff_check`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FdOptions {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Coordinates to check. Kink-adjacent draws are replaced by fresh ones
    /// until this many are checked or the valid coordinates run out.
    pub samples: usize,
    /// Absolute floor of the relative-error denominator, so that exactly
    /// zero gradients are compared against round-off rather than 0.
    pub floor: f64,
    /// Relative disagreement between the h and 2h stencils above which a
    /// coordinate counts as sitting next to a kink.
    pub kink_tol: f64,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            samples: 200,
            floor: 1e-6,
            kink_tol: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    /// Coordinates dropped because a kink lies within 2h.
    pub skipped: usize,
}

/// Outcome of probing one scalar coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Probe {
    /// Relative error between analytic and central-difference derivatives.
    Checked(f64),
    /// Differences at steps h and 2h disagree beyond what curvature explains,
    /// so a non-smooth point lies inside the stencil.
    Kink,
}

/// Compares an analytic derivative with central differences of `f` along one
/// coordinate. `f(delta)` evaluates the function with the coordinate moved by
/// `delta`.
///
/// On a smooth function the gap between right and left slopes doubles from
/// step h to 2h, and the two central differences agree to O(h²). A kink
/// within 2h breaks at least one of the two.
pub fn probe_coordinate(f: &mut impl FnMut(f64) -> Result<f64>, analytic: f64, opts: &FdOptions) -> Result<Probe> {
    let h = opts.h;
    let f0 = f(0.0)?;
    let (fp1, fm1) = (f(h)?, f(-h)?);
    let (fp2, fm2) = (f(2.0 * h)?, f(-2.0 * h)?);
    let gap1 = (fp1 - 2.0 * f0 + fm1) / h;
    let gap2 = (fp2 - 2.0 * f0 + fm2) / (2.0 * h);
    let c1 = (fp1 - fm1) / (2.0 * h);
    let c2 = (fp2 - fm2) / (4.0 * h);
    let scale = c1.abs().max(c2.abs()).max(opts.floor);
    if (gap2 - 2.0 * gap1).abs() > opts.kink_tol * scale || (c2 - c1).abs() > opts.kink_tol * scale {
        return Ok(Probe::Kink);
    }
    let denom = analytic.abs().max(c1.abs()).max(opts.floor);
    Ok(Probe::Checked((analytic - c1).abs() / denom))
}

fn perturbed(clip: &InvClip, frame: usize, pixel: usize, delta: f64) -> Result<InvClip> {
    let mut frames = clip.frames().to_vec();
    let f = &frames[frame];
    let mut values = f.values().to_vec();
    values[pixel] += delta;
    frames[frame] = InvDepthFrame::new(f.width(), f.height(), values, f.mask().to_vec())?;
    InvClip::new(frames, clip.timeline().to_vec())
}

/// Checks a loss gradient against central differences on a random sample of
/// valid prediction coordinates, skipping coordinates with a kink within 2h.
pub fn finite_diff_check<F>(loss: F, pred: &InvClip, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&InvClip) -> Result<LossResult>,
{
    if !(opts.h > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let base = loss(pred)?;
    let coords: Vec<(usize, usize)> = pred
        .frames()
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| fr.mask().iter().enumerate().filter(|(_, &m)| m).map(move |(i, _)| (f, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let picks = sample(&mut rng, coords.len(), coords.len());
    let mut report = FdReport {
        max_rel_err: 0.0,
        pass: true,
        checked: 0,
        skipped: 0,
    };
    for k in picks.iter() {
        if report.checked >= opts.samples {
            break;
        }
        let (f, i) = coords[k];
        let mut eval = |delta: f64| -> Result<f64> {
            if delta == 0.0 {
                return Ok(base.value);
            }
            Ok(loss(&perturbed(pred, f, i, delta)?)?.value)
        };
        match probe_coordinate(&mut eval, base.grad[f][i], opts)? {
            Probe::Kink => report.skipped += 1,
            Probe::Checked(err) => {
                report.checked += 1;
                report.max_rel_err = report.max_rel_err.max(err);
            }
        }
    }
    report.pass = report.max_rel_err <= opts.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn clip_1px(values: &[f64]) -> InvClip {
        InvClip::from_frames(values.iter().map(|&v| InvDepthFrame::dense(1, 1, vec![v]).unwrap()).collect()).unwrap()
    }

    fn random_clip(rng: &mut ChaCha8Rng, n: usize, w: usize, h: usize) -> InvClip {
        InvClip::from_frames(
            (0..n)
                .map(|_| InvDepthFrame::dense(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    /// Ground truth whose adjacent frames differ by less than `amp` per pixel
    /// relative to the clip spread, so most TGM elements are active.
    fn smooth_pair(rng: &mut ChaCha8Rng, n: usize, w: usize, h: usize) -> (InvClip, InvClip) {
        let base: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>()).collect();
        let gt: Vec<InvDepthFrame> = (0..n)
            .map(|k| {
                InvDepthFrame::dense(
                    w,
                    h,
                    base.iter().map(|b| b + 0.003 * k as f64 + 0.004 * rng.random::<f64>()).collect(),
                )
                .unwrap()
            })
            .collect();
        let pred: Vec<InvDepthFrame> = gt
            .iter()
            .map(|g| g.map_valid(|v| 0.8 * v + 0.1 + 0.02 * (v * 37.0).sin()).unwrap())
            .collect();
        (InvClip::from_frames(pred).unwrap(), InvClip::from_frames(gt).unwrap())
    }

    #[test]
    fn opw_single_pixel_example() {
        let p = clip_1px(&[2.0, 5.0]);
        let r = opw_loss(&p, &[FlowField::zeros(1, 1)]).unwrap();
        assert_eq!(r.value, 3.0);
        assert_eq!(r.grad, vec![vec![-1.0], vec![1.0]]);
    }

    #[test]
    fn opw_identical_frames_zero_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_clip(&mut rng, 1, 5, 4).frames()[0].clone();
        let p = InvClip::from_frames(vec![f.clone(), f.clone(), f]).unwrap();
        let r = opw_loss(&p, &[FlowField::zeros(5, 4), FlowField::zeros(5, 4)]).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn opw_without_correspondences_errors() {
        let p = clip_1px(&[2.0, 5.0]);
        let flow = FlowField::new(1, 1, vec![[3.0, 0.0]], vec![true]).unwrap();
        assert!(matches!(opw_loss(&p, &[flow]), Err(Error::EmptyCorrespondence)));
    }

    #[test]
    fn se_single_pixel_example() {
        let d = clip_1px(&[0.0, 0.3]);
        let g = clip_1px(&[0.0, 0.1]);
        let r = se_normalized(&d, &g, &[FlowField::zeros(1, 1)]).unwrap();
        assert!((r.value - 0.2).abs() < 1e-15);
    }

    #[test]
    fn tgm_single_pixel_examples() {
        let d = clip_1px(&[0.2, 0.3]);
        let r = tgm_normalized(&d, &clip_1px(&[0.2, 0.24]), TgmThreshold::default()).unwrap();
        assert!((r.value - 0.06).abs() < 1e-12);
        assert_eq!(r.active_count, 1);

        let r = tgm_normalized(&d, &clip_1px(&[0.2, 0.26]), TgmThreshold::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.active_count, 0);
        assert!(r.warning.is_some());
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (pred, gt) = smooth_pair(&mut rng, 3, 6, 5);
        let th = TgmThreshold::default();
        let tgm = tgm_loss(&pred, &gt, th).unwrap();
        let ssi = ssi_loss(&pred, &gt).unwrap();
        let total = total_loss(&pred, &gt, LossWeights::default(), th).unwrap();
        assert!((total.value - (10.0 * tgm.value + ssi.value)).abs() < 1e-12);
        let only_ssi = total_loss(&pred, &gt, LossWeights { alpha: 0.0, beta: 2.0 }, th).unwrap();
        assert!((only_ssi.value - 2.0 * ssi.value).abs() < 1e-12);
    }

    #[test]
    fn losses_vanish_at_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, gt) = smooth_pair(&mut rng, 4, 6, 6);
        let zero_flow = vec![FlowField::zeros(6, 6); 3];
        let th = TgmThreshold::default();
        assert_eq!(ssi_loss(&gt, &gt).unwrap().value, 0.0);
        assert_eq!(tgm_loss(&gt, &gt, th).unwrap().value, 0.0);
        assert_eq!(se_loss(&gt, &gt, &zero_flow).unwrap().value, 0.0);
        assert_eq!(video_align_loss(&gt, &gt).unwrap().value, 0.0);
        assert_eq!(total_loss(&gt, &gt, LossWeights::default(), th).unwrap().value, 0.0);
    }

    #[test]
    fn ssi_perturbation_is_local() {
        // In normalized space the residual is zero except at the bumped
        // pixel, so only stencil neighbours receive gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_clip(&mut rng, 1, 16, 16);
        let mut vals = g.frames()[0].values().to_vec();
        let (r0, c0) = (8usize, 8usize);
        vals[r0 * 16 + c0] += 1e-3;
        let d = InvClip::from_frames(vec![InvDepthFrame::dense(16, 16, vals).unwrap()]).unwrap();
        let r = ssi_normalized(&d, &g).unwrap();
        assert!(r.value > 0.0);
        assert!(r.grad[0][r0 * 16 + c0] != 0.0);
        let reach = 1 << (GRADIENT_SCALES - 1);
        for (i, v) in r.grad[0].iter().enumerate() {
            let (r, c) = (i / 16, i % 16);
            let near = r.abs_diff(r0) <= reach && c.abs_diff(c0) <= reach;
            if !near {
                assert_eq!(*v, 0.0, "pixel ({r},{c}) outside stencil reach");
            }
        }
        // Through the normalization the full loss still reacts.
        assert!(ssi_loss(&d, &g).unwrap().value > 0.0);
    }

    #[test]
    fn tgm_active_count_monotone_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (pred, gt) = smooth_pair(&mut rng, 4, 8, 8);
        let mut last = usize::MAX;
        for tau in [1.0, 0.3, 0.1, 0.05, 0.02, 0.01, 0.001] {
            let n = tgm_loss(&pred, &gt, TgmThreshold::new(tau).unwrap()).unwrap().active_count;
            assert!(n <= last);
            last = n;
        }
    }

    #[test]
    fn video_align_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt = random_clip(&mut rng, 3, 4, 4);
        let affine = gt.map_frames(|f| f.map_valid(|v| 1.7 * v + 0.4)).unwrap();
        assert!(video_align_loss(&affine, &gt).unwrap().value < 1e-12);
        let flicker = InvClip::from_frames(
            gt.frames()
                .iter()
                .enumerate()
                .map(|(k, f)| f.map_valid(|v| v + if k % 2 == 0 { 0.1 } else { -0.1 }).unwrap())
                .collect(),
        )
        .unwrap();
        assert!(video_align_loss(&flicker, &gt).unwrap().value > 0.0);
    }

    #[test]
    fn video_align_closed_form_beats_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt = random_clip(&mut rng, 2, 3, 3);
        let pred = random_clip(&mut rng, 2, 3, 3);
        let fit = fit_shared(pred.frames(), gt.frames()).unwrap();
        let sq = |s: f64, t: f64| -> f64 {
            pred.frames()
                .iter()
                .zip(gt.frames())
                .flat_map(|(p, g)| p.values().iter().zip(g.values()))
                .map(|(p, g)| (s * p + t - g).powi(2))
                .sum()
        };
        let best = sq(fit.map.scale, fit.map.shift);
        for a in -10..10 {
            for b in -10..10 {
                let s = fit.map.scale + 0.01 * a as f64;
                let t = fit.map.shift + 0.01 * b as f64;
                assert!(best <= sq(s, t) + 1e-15);
            }
        }
    }

    #[test]
    fn fd_quadratic_surrogate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt = random_clip(&mut rng, 4, 8, 8);
        let pred = random_clip(&mut rng, 4, 8, 8);
        let quad = |p: &InvClip| -> Result<LossResult> {
            let mut out = LossResult::zeros_like(p);
            for (f, (pf, gf)) in p.frames().iter().zip(gt.frames()).enumerate() {
                for i in 0..pf.len() {
                    let r = pf.values()[i] - gf.values()[i];
                    out.value += r * r;
                    out.grad[f][i] = 2.0 * r;
                }
            }
            Ok(out)
        };
        let opts = FdOptions {
            h: 1e-4,
            ..FdOptions::default()
        };
        let rep = finite_diff_check(quad, &pred, &opts).unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
        assert_eq!(rep.checked, 200, "{rep:?}");
    }

    #[test]
    fn fd_skips_kinks() {
        let mut f = |x: f64| -> Result<f64> { Ok(x.abs()) };
        assert_eq!(probe_coordinate(&mut f, 0.0, &FdOptions::default()).unwrap(), Probe::Kink);
        let mut g = |x: f64| -> Result<f64> { Ok((1.0 + x).abs()) };
        match probe_coordinate(&mut g, 1.0, &FdOptions::default()).unwrap() {
            Probe::Checked(e) => assert!(e < 1e-9),
            Probe::Kink => panic!("smooth point flagged as kink"),
        }
    }

    #[test]
    fn kink_anywhere_in_stencil_is_caught() {
        let opts = FdOptions::default();
        let h = opts.h;
        for frac in [0.0, 0.1, 0.5, 2.0 / 3.0, 0.9, 1.0, 1.5, 1.9] {
            for sign in [1.0, -1.0] {
                let at = sign * frac * h;
                let mut f = |x: f64| -> Result<f64> { Ok((x - at).abs() + 0.3 * x) };
                let analytic = if at > 0.0 { -0.7 } else { 1.3 };
                match probe_coordinate(&mut f, analytic, &opts).unwrap() {
                    Probe::Kink => {}
                    Probe::Checked(e) => assert!(e < 1e-6, "kink at {frac}h missed with error {e}"),
                }
            }
        }
    }

    #[test]
    fn curvature_with_tiny_gradient_is_not_a_kink() {
        let opts = FdOptions {
            h: 1e-4,
            ..FdOptions::default()
        };
        for x0 in [1e-3, 1e-5, 0.0] {
            let mut f = |d: f64| -> Result<f64> { Ok(50.0 * (x0 + d) * (x0 + d)) };
            assert!(
                matches!(probe_coordinate(&mut f, 100.0 * x0, &opts).unwrap(), Probe::Checked(_)),
                "{x0}"
            );
        }
    }

    #[test]
    fn fd_detects_sign_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (pred, gt) = smooth_pair(&mut rng, 4, 8, 8);
        let broken = |p: &InvClip| {
            ssi_loss(p, &gt).map(|r| LossResult {
                grad: r.scaled(-1.0).grad,
                ..r
            })
        };
        let rep = finite_diff_check(broken, &pred, &FdOptions::default()).unwrap();
        assert!(!rep.pass);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (pred, gt) = smooth_pair(&mut rng, 4, 8, 8);
        let flows: Vec<FlowField> = (0..3)
            .map(|_| {
                FlowField::new(
                    8,
                    8,
                    (0..64).map(|_| [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]).collect(),
                    vec![true; 64],
                )
                .unwrap()
            })
            .collect();
        let th = TgmThreshold::default();
        let opts = FdOptions::default();
        let checks: Vec<(&str, Box<dyn Fn(&InvClip) -> Result<LossResult>>)> = vec![
            ("ssi", Box::new(|p| ssi_loss(p, &gt))),
            ("opw", Box::new(|p| opw_loss(p, &flows))),
            ("se", Box::new(|p| se_loss(p, &gt, &flows))),
            ("tgm", Box::new(|p| tgm_loss(p, &gt, th))),
            ("video_align", Box::new(|p| video_align_loss(p, &gt))),
            ("total", Box::new(|p| total_loss(p, &gt, LossWeights::default(), th))),
        ];
        for (name, f) in checks {
            let rep = finite_diff_check(f, &pred, &opts).unwrap();
            assert!(rep.pass, "{name}: {rep:?}");
            assert_eq!(rep.checked, 200, "{name}: {rep:?}");
        }
    }
}
