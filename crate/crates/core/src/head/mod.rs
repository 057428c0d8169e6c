//! Toy spatio-temporal refiner: pooled noisy inverse depth is lifted to `C`
//! channels and passed through blocks of {local spatial mixer, temporal
//! self-attention per site, feed-forward}, then projected back, upsampled and
//! added to the input. Forward and backward passes are written by hand.
//!
//! Features are stored token-major: token `t = n * S + s` for frame `n` and
//! pooled site `s`, channel innermost.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{InvClip, InvDepthFrame};
use crate::losses::FdReport;
use crate::synth::stream_rng;

pub mod checkpoint;
pub mod train;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    /// Largest clip length; rows of the positional table.
    pub clip_len: usize,
    pub channels: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_expansion: usize,
    /// Spatial pooling factor.
    pub patch: usize,
    pub seed: u64,
    pub residual_output: bool,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            clip_len: 32,
            channels: 32,
            heads: 4,
            layers: 4,
            ffn_expansion: 4,
            patch: 4,
            seed: 0,
            residual_output: true,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            )));
        }
        if self.clip_len < 2 {
            return Err(Error::config("clip_len must be at least 2"));
        }
        if self.layers == 0 || self.patch == 0 || self.ffn_expansion == 0 {
            return Err(Error::config("layers, patch and ffn_expansion must be positive"));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        self.channels * self.ffn_expansion
    }
}

/// Name, shape and offset of one tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerIdx {
    dw: usize,
    pw: usize,
    pw_b: usize,
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Index {
    lift_w: usize,
    lift_b: usize,
    pos: usize,
    layers: Vec<LayerIdx>,
    out_w: usize,
    out_b: usize,
}

/// How a tensor is initialized.
#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform { fan_in: usize },
    Normal(f64),
    Zero,
    One,
}

fn layout(cfg: &RefinerConfig) -> (Vec<TensorInfo>, Vec<Init>, Index) {
    let (c, f) = (cfg.channels, cfg.hidden());
    let mut tensors = Vec::new();
    let mut inits = Vec::new();
    let mut next = 0;
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        let offset = next;
        next += shape.iter().product::<usize>();
        tensors.push(TensorInfo { name, shape, offset });
        inits.push(init);
        offset
    };
    let lift_w = add("lift.w".into(), vec![c], Init::Uniform { fan_in: 1 });
    let lift_b = add("lift.b".into(), vec![c], Init::Uniform { fan_in: 1 });
    let pos = add("pos".into(), vec![cfg.clip_len, c], Init::Normal(0.02));
    let layers = (0..cfg.layers)
        .map(|l| {
            let mut t = |n: &str, shape: Vec<usize>, init: Init| add(format!("layers.{l}.{n}"), shape, init);
            LayerIdx {
                dw: t("mixer.depthwise", vec![c, 9], Init::Uniform { fan_in: 9 }),
                pw: t("mixer.pointwise", vec![c, c], Init::Uniform { fan_in: c }),
                pw_b: t("mixer.pointwise_b", vec![c], Init::Zero),
                ln1_g: t("ln1.g", vec![c], Init::One),
                ln1_b: t("ln1.b", vec![c], Init::Zero),
                wq: t("attn.q", vec![c, c], Init::Uniform { fan_in: c }),
                wk: t("attn.k", vec![c, c], Init::Uniform { fan_in: c }),
                wv: t("attn.v", vec![c, c], Init::Uniform { fan_in: c }),
                wo: t("attn.o", vec![c, c], Init::Uniform { fan_in: c }),
                ln2_g: t("ln2.g", vec![c], Init::One),
                ln2_b: t("ln2.b", vec![c], Init::Zero),
                w1: t("ffn.w1", vec![c, f], Init::Uniform { fan_in: c }),
                b1: t("ffn.b1", vec![f], Init::Zero),
                w2: t("ffn.w2", vec![f, c], Init::Uniform { fan_in: f }),
                b2: t("ffn.b2", vec![c], Init::Zero),
            }
        })
        .collect();
    let out_w = add("out.w".into(), vec![c], Init::Zero);
    let out_b = add("out.b".into(), vec![1], Init::Zero);
    (
        tensors,
        inits,
        Index {
            lift_w,
            lift_b,
            pos,
            layers,
            out_w,
            out_b,
        },
    )
}

/// Flat parameters plus the tensor table describing them.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerParams {
    pub config: RefinerConfig,
    pub values: Vec<f64>,
    pub tensors: Vec<TensorInfo>,
}

/// Initial parameters: projections uniform in `±sqrt(1/fan_in)`, output
/// projection zero, positional table `N(0, 0.02²)`, norms at unit gain.
/// Values are rounded to f32 so checkpoints store them exactly.
pub fn init_params(cfg: &RefinerConfig) -> Result<RefinerParams> {
    cfg.validate()?;
    let (tensors, inits, _) = layout(cfg);
    let total = tensors.last().map(|t| t.offset + t.len()).unwrap_or(0);
    let mut values = vec![0.0; total];
    for (k, (t, init)) in tensors.iter().zip(&inits).enumerate() {
        let mut rng = stream_rng(cfg.seed, k as u64);
        let slot = &mut values[t.range()];
        match *init {
            Init::Uniform { fan_in } => {
                let exact = (1.0 / fan_in as f64).sqrt();
                let mut b32 = exact as f32;
                if b32 as f64 > exact {
                    b32 = f32::from_bits(b32.to_bits() - 1);
                }
                let bound = b32 as f64;
                let dist = Uniform::new_inclusive(-bound, bound).expect("positive bound");
                for v in slot {
                    *v = (dist.sample(&mut rng) as f32 as f64).clamp(-bound, bound);
                }
            }
            Init::Normal(sd) => {
                let dist = Normal::new(0.0, sd).expect("positive stdev");
                for v in slot {
                    *v = dist.sample(&mut rng) as f32 as f64;
                }
            }
            Init::Zero => slot.fill(0.0),
            Init::One => slot.fill(1.0),
        }
    }
    Ok(RefinerParams {
        config: *cfg,
        values,
        tensors,
    })
}

impl RefinerParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.tensor(name).map(|t| &self.values[t.range()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.tensor(name)?.range();
        Some(&mut self.values[r])
    }

    fn index(&self) -> Index {
        layout(&self.config).2
    }

    /// Rebuilds parameters from a stored tensor table and values.
    pub fn from_parts(config: RefinerConfig, tensors: Vec<TensorInfo>, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (expected, _, _) = layout(&config);
        if expected != tensors {
            return Err(Error::shape("tensor table does not match the refiner configuration"));
        }
        let total = expected.last().map(|t| t.offset + t.len()).unwrap_or(0);
        if values.len() != total {
            return Err(Error::shape(format!("{} parameter values, expected {total}", values.len())));
        }
        Ok(Self { config, values, tensors })
    }
}

// ---------------------------------------------------------------------------
// dense helpers, row-major

/// `out[r, j] += Σ_k a[r, k] * b[k, j]`
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, inner: usize, cols: usize) {
    for r in 0..rows {
        let o = &mut out[r * cols..(r + 1) * cols];
        for k in 0..inner {
            let x = a[r * inner + k];
            if x == 0.0 {
                continue;
            }
            let brow = &b[k * cols..(k + 1) * cols];
            for (oj, bj) in o.iter_mut().zip(brow) {
                *oj += x * bj;
            }
        }
    }
}

fn matmul(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    matmul_acc(a, b, &mut out, rows, inner, cols);
    out
}

/// `out[k, j] += Σ_r a[r, k] * d[r, j]` (weight gradient)
fn matmul_at_acc(a: &[f64], d: &[f64], out: &mut [f64], rows: usize, inner: usize, cols: usize) {
    for r in 0..rows {
        let drow = &d[r * cols..(r + 1) * cols];
        for k in 0..inner {
            let x = a[r * inner + k];
            if x == 0.0 {
                continue;
            }
            let o = &mut out[k * cols..(k + 1) * cols];
            for (oj, dj) in o.iter_mut().zip(drow) {
                *oj += x * dj;
            }
        }
    }
}

/// `out[r, k] += Σ_j d[r, j] * b[k, j]` (input gradient)
fn matmul_bt_acc(d: &[f64], b: &[f64], out: &mut [f64], rows: usize, inner: usize, cols: usize) {
    for r in 0..rows {
        let drow = &d[r * cols..(r + 1) * cols];
        for k in 0..inner {
            let brow = &b[k * cols..(k + 1) * cols];
            out[r * inner + k] += drow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    for row in x.chunks_mut(b.len()) {
        for (v, bi) in row.iter_mut().zip(b) {
            *v += bi;
        }
    }
}

fn bias_grad(d: &[f64], out: &mut [f64]) {
    let c = out.len();
    for row in d.chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

// ---------------------------------------------------------------------------
// components

/// Geometry of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub grid_w: usize,
    pub grid_h: usize,
}

impl Geometry {
    pub fn sites(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.sites()
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let c = g.len();
    let tokens = x.len() / c;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; tokens];
    for t in 0..tokens {
        let row = &x[t * c..(t + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = r;
        for j in 0..c {
            let xh = (row[j] - mean) * r;
            xhat[t * c + j] = xh;
            y[t * c + j] = g[j] * xh + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(dy: &[f64], cache: &LnCache, g: &[f64], dg: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let c = g.len();
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; c];
    for (t, &r) in cache.rstd.iter().enumerate() {
        let xh = &cache.xhat[t * c..(t + 1) * c];
        let d = &dy[t * c..(t + 1) * c];
        for j in 0..c {
            dg[j] += d[j] * xh[j];
            db[j] += d[j];
            dxhat[j] = d[j] * g[j];
        }
        let m1 = dxhat.iter().sum::<f64>() / c as f64;
        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        for j in 0..c {
            dx[t * c + j] = r * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_K * (z + GELU_A * z * z * z)).tanh())
}

fn gelu_grad(z: f64) -> f64 {
    let th = (GELU_K * (z + GELU_A * z * z * z)).tanh();
    0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_A * z * z)
}

/// Block means of valid pixels; a block with no valid pixel pools to 0.
fn pool(input: &InvClip, geo: &Geometry, p: usize) -> (Vec<f64>, Vec<f64>) {
    let s = geo.sites();
    let mut x = vec![0.0; geo.frames * s];
    let mut inv_count = vec![0.0; geo.frames * s];
    for (n, f) in input.frames().iter().enumerate() {
        for gr in 0..geo.grid_h {
            for gc in 0..geo.grid_w {
                let (mut sum, mut cnt) = (0.0, 0usize);
                for r in gr * p..(gr + 1) * p {
                    for c in gc * p..(gc + 1) * p {
                        let i = r * geo.width + c;
                        if f.mask()[i] {
                            sum += f.values()[i];
                            cnt += 1;
                        }
                    }
                }
                let t = n * s + gr * geo.grid_w + gc;
                if cnt > 0 {
                    x[t] = sum / cnt as f64;
                    inv_count[t] = 1.0 / cnt as f64;
                }
            }
        }
    }
    (x, inv_count)
}

/// Half-pixel-centred bilinear taps from a `grid`-long axis to `grid * p`.
fn upsample_taps(grid: usize, p: usize) -> Vec<[(usize, f64); 2]> {
    (0..grid * p)
        .map(|d| {
            let src = ((d as f64 + 0.5) / p as f64 - 0.5).clamp(0.0, (grid - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(grid - 1);
            let w1 = src - i0 as f64;
            [(i0, 1.0 - w1), (i1, w1)]
        })
        .collect()
}

/// Depthwise 3x3 stencil with zero padding, per frame and channel.
fn depthwise(h: &[f64], k: &[f64], geo: &Geometry, c: usize) -> Vec<f64> {
    let (gw, gh, s) = (geo.grid_w as isize, geo.grid_h as isize, geo.sites());
    let mut out = vec![0.0; h.len()];
    for n in 0..geo.frames {
        for r in 0..gh {
            for col in 0..gw {
                let t = n * s + (r * gw + col) as usize;
                for dr in -1..=1isize {
                    for dc in -1..=1isize {
                        let (rr, cc) = (r + dr, col + dc);
                        if rr < 0 || cc < 0 || rr >= gh || cc >= gw {
                            continue;
                        }
                        let src = n * s + (rr * gw + cc) as usize;
                        let tap = ((dr + 1) * 3 + (dc + 1)) as usize;
                        for ch in 0..c {
                            out[t * c + ch] += k[ch * 9 + tap] * h[src * c + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

fn depthwise_backward(d: &[f64], h: &[f64], k: &[f64], geo: &Geometry, c: usize, dk: &mut [f64]) -> Vec<f64> {
    let (gw, gh, s) = (geo.grid_w as isize, geo.grid_h as isize, geo.sites());
    let mut dh = vec![0.0; h.len()];
    for n in 0..geo.frames {
        for r in 0..gh {
            for col in 0..gw {
                let t = n * s + (r * gw + col) as usize;
                for dr in -1..=1isize {
                    for dc in -1..=1isize {
                        let (rr, cc) = (r + dr, col + dc);
                        if rr < 0 || cc < 0 || rr >= gh || cc >= gw {
                            continue;
                        }
                        let src = n * s + (rr * gw + cc) as usize;
                        let tap = ((dr + 1) * 3 + (dc + 1)) as usize;
                        for ch in 0..c {
                            dk[ch * 9 + tap] += d[t * c + ch] * h[src * c + ch];
                            dh[src * c + ch] += k[ch * 9 + tap] * d[t * c + ch];
                        }
                    }
                }
            }
        }
    }
    dh
}

/// Cached intermediates of one temporal block.
#[derive(Debug, Clone)]
pub struct LayerCache {
    h_in: Vec<f64>,
    conv: Vec<f64>,
    ln1: LnCache,
    u1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention probabilities, `[site][head][query][key]`.
    attn: Vec<f64>,
    o: Vec<f64>,
    h_attn: Vec<f64>,
    ln2: LnCache,
    u2: Vec<f64>,
    z: Vec<f64>,
    g: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub geometry: Geometry,
    inv_count: Vec<f64>,
    pooled: Vec<f64>,
    layers: Vec<LayerCache>,
    h_final: Vec<f64>,
    masks: Vec<Vec<bool>>,
}

impl ForwardCache {
    /// Attention probabilities of `layer` as `[site][head][query][key]`.
    pub fn attention(&self, layer: usize) -> &[f64] {
        &self.layers[layer].attn
    }
}

/// Parameter gradients and input gradients of one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<Vec<f64>>,
}

struct Views<'a> {
    p: &'a [f64],
}

impl<'a> Views<'a> {
    fn t(&self, off: usize, len: usize) -> &'a [f64] {
        &self.p[off..off + len]
    }
}

/// Forward and backward through the whole refiner.
pub struct Refiner<'a> {
    pub params: &'a RefinerParams,
    idx: Index,
}

impl<'a> Refiner<'a> {
    pub fn new(params: &'a RefinerParams) -> Self {
        Self {
            idx: params.index(),
            params,
        }
    }

    fn cfg(&self) -> &RefinerConfig {
        &self.params.config
    }

    pub fn geometry(&self, input: &InvClip) -> Result<Geometry> {
        let cfg = self.cfg();
        let (w, h) = input.dims();
        if input.is_empty() {
            return Err(Error::shape("refiner input has no frames"));
        }
        if input.len() > cfg.clip_len {
            return Err(Error::shape(format!(
                "clip of {} frames exceeds clip_len {}",
                input.len(),
                cfg.clip_len
            )));
        }
        if w % cfg.patch != 0 || h % cfg.patch != 0 || w == 0 || h == 0 {
            return Err(Error::shape(format!("{w}x{h} is not divisible by patch {}", cfg.patch)));
        }
        Ok(Geometry {
            frames: input.len(),
            width: w,
            height: h,
            grid_w: w / cfg.patch,
            grid_h: h / cfg.patch,
        })
    }

    pub fn forward(&self, input: &InvClip) -> Result<InvClip> {
        Ok(self.forward_cached(input)?.0)
    }

    /// Lift of pooled values plus positional rows.
    fn embed(&self, pooled: &[f64], geo: &Geometry) -> Vec<f64> {
        let c = self.cfg().channels;
        let v = Views { p: &self.params.values };
        let (w, b, pos) = (
            v.t(self.idx.lift_w, c),
            v.t(self.idx.lift_b, c),
            v.t(self.idx.pos, self.cfg().clip_len * c),
        );
        let s = geo.sites();
        let mut h = vec![0.0; geo.tokens() * c];
        for (t, &x) in pooled.iter().enumerate() {
            let n = t / s;
            for j in 0..c {
                h[t * c + j] = w[j] * x + b[j] + pos[n * c + j];
            }
        }
        h
    }

    fn layer_forward(&self, l: usize, h_in: Vec<f64>, geo: &Geometry) -> LayerCache {
        let cfg = self.cfg();
        let (c, f, heads) = (cfg.channels, cfg.hidden(), cfg.heads);
        let dh = c / heads;
        let li = self.idx.layers[l];
        let v = Views { p: &self.params.values };
        let tokens = geo.tokens();
        let (s, n_fr) = (geo.sites(), geo.frames);

        let conv = depthwise(&h_in, v.t(li.dw, c * 9), geo, c);
        let mut mix = matmul(&conv, v.t(li.pw, c * c), tokens, c, c);
        add_bias(&mut mix, v.t(li.pw_b, c));
        let h_mix: Vec<f64> = h_in.iter().zip(&mix).map(|(a, b)| a + b).collect();

        let (u1, ln1) = layer_norm(&h_mix, v.t(li.ln1_g, c), v.t(li.ln1_b, c));
        let q = matmul(&u1, v.t(li.wq, c * c), tokens, c, c);
        let k = matmul(&u1, v.t(li.wk, c * c), tokens, c, c);
        let vv = matmul(&u1, v.t(li.wv, c * c), tokens, c, c);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn = vec![0.0; s * heads * n_fr * n_fr];
        let mut o = vec![0.0; tokens * c];
        let mut row = vec![0.0; n_fr];
        for site in 0..s {
            for hd in 0..heads {
                let base = (site * heads + hd) * n_fr * n_fr;
                for qi in 0..n_fr {
                    let qt = (qi * s + site) * c + hd * dh;
                    let mut mx = f64::NEG_INFINITY;
                    for (ki, r) in row.iter_mut().enumerate() {
                        let kt = (ki * s + site) * c + hd * dh;
                        let dot: f64 = (0..dh).map(|j| q[qt + j] * k[kt + j]).sum();
                        *r = dot * scale;
                        mx = mx.max(*r);
                    }
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - mx).exp();
                        z += *r;
                    }
                    for (ki, r) in row.iter().enumerate() {
                        let a = r / z;
                        attn[base + qi * n_fr + ki] = a;
                        let vt = (ki * s + site) * c + hd * dh;
                        for j in 0..dh {
                            o[qt + j] += a * vv[vt + j];
                        }
                    }
                }
            }
        }
        let proj = matmul(&o, v.t(li.wo, c * c), tokens, c, c);
        let h_attn: Vec<f64> = h_mix.iter().zip(&proj).map(|(a, b)| a + b).collect();

        let (u2, ln2) = layer_norm(&h_attn, v.t(li.ln2_g, c), v.t(li.ln2_b, c));
        let mut z = matmul(&u2, v.t(li.w1, c * f), tokens, c, f);
        add_bias(&mut z, v.t(li.b1, f));
        let g: Vec<f64> = z.iter().map(|&x| gelu(x)).collect();
        LayerCache {
            h_in,
            conv,
            ln1,
            u1,
            q,
            k,
            v: vv,
            attn,
            o,
            h_attn,
            ln2,
            u2,
            z,
            g,
        }
    }

    fn layer_output(&self, l: usize, cache: &LayerCache, tokens: usize) -> Vec<f64> {
        let cfg = self.cfg();
        let (c, f) = (cfg.channels, cfg.hidden());
        let li = self.idx.layers[l];
        let v = Views { p: &self.params.values };
        let mut ffn = matmul(&cache.g, v.t(li.w2, f * c), tokens, f, c);
        add_bias(&mut ffn, v.t(li.b2, c));
        cache.h_attn.iter().zip(&ffn).map(|(a, b)| a + b).collect()
    }

    /// Returns `d h_in` and accumulates parameter gradients.
    fn layer_backward(&self, l: usize, cache: &LayerCache, d_out: &[f64], geo: &Geometry, grad: &mut [f64]) -> Vec<f64> {
        let cfg = self.cfg();
        let (c, f, heads) = (cfg.channels, cfg.hidden(), cfg.heads);
        let dh = c / heads;
        let li = self.idx.layers[l];
        let v = Views { p: &self.params.values };
        let tokens = geo.tokens();
        let (s, n_fr) = (geo.sites(), geo.frames);

        // FFN: out = h_attn + gelu(LN2(h_attn) W1 + b1) W2 + b2
        let mut d_hattn = d_out.to_vec();
        matmul_at_acc(&cache.g, d_out, &mut grad[li.w2..li.w2 + f * c], tokens, f, c);
        bias_grad(d_out, &mut grad[li.b2..li.b2 + c]);
        let mut dg = vec![0.0; tokens * f];
        matmul_bt_acc(d_out, v.t(li.w2, f * c), &mut dg, tokens, f, c);
        for (d, &z) in dg.iter_mut().zip(&cache.z) {
            *d *= gelu_grad(z);
        }
        matmul_at_acc(&cache.u2, &dg, &mut grad[li.w1..li.w1 + c * f], tokens, c, f);
        bias_grad(&dg, &mut grad[li.b1..li.b1 + f]);
        let mut du2 = vec![0.0; tokens * c];
        matmul_bt_acc(&dg, v.t(li.w1, c * f), &mut du2, tokens, c, f);
        let (g2, rest) = grad[li.ln2_g..].split_at_mut(c);
        let dln = layer_norm_backward(&du2, &cache.ln2, v.t(li.ln2_g, c), g2, &mut rest[..c]);
        for (a, b) in d_hattn.iter_mut().zip(&dln) {
            *a += b;
        }

        // attention: h_attn = h_mix + (softmax(QKᵀ/√d) V) Wo
        let mut d_hmix = d_hattn.clone();
        matmul_at_acc(&cache.o, &d_hattn, &mut grad[li.wo..li.wo + c * c], tokens, c, c);
        let mut d_o = vec![0.0; tokens * c];
        matmul_bt_acc(&d_hattn, v.t(li.wo, c * c), &mut d_o, tokens, c, c);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; tokens * c];
        let mut dk = vec![0.0; tokens * c];
        let mut dv = vec![0.0; tokens * c];
        let mut da = vec![0.0; n_fr];
        for site in 0..s {
            for hd in 0..heads {
                let base = (site * heads + hd) * n_fr * n_fr;
                for qi in 0..n_fr {
                    let qt = (qi * s + site) * c + hd * dh;
                    let a_row = &cache.attn[base + qi * n_fr..base + (qi + 1) * n_fr];
                    let mut dot = 0.0;
                    for ki in 0..n_fr {
                        let vt = (ki * s + site) * c + hd * dh;
                        let mut acc = 0.0;
                        for j in 0..dh {
                            acc += d_o[qt + j] * cache.v[vt + j];
                            dv[vt + j] += a_row[ki] * d_o[qt + j];
                        }
                        da[ki] = acc;
                        dot += a_row[ki] * acc;
                    }
                    for ki in 0..n_fr {
                        let ds = a_row[ki] * (da[ki] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kt = (ki * s + site) * c + hd * dh;
                        for j in 0..dh {
                            dq[qt + j] += ds * cache.k[kt + j];
                            dk[kt + j] += ds * cache.q[qt + j];
                        }
                    }
                }
            }
        }
        let mut du1 = vec![0.0; tokens * c];
        for (w, d) in [(li.wq, &dq), (li.wk, &dk), (li.wv, &dv)] {
            matmul_at_acc(&cache.u1, d, &mut grad[w..w + c * c], tokens, c, c);
            matmul_bt_acc(d, v.t(w, c * c), &mut du1, tokens, c, c);
        }
        let (g1, rest) = grad[li.ln1_g..].split_at_mut(c);
        let dln = layer_norm_backward(&du1, &cache.ln1, v.t(li.ln1_g, c), g1, &mut rest[..c]);
        for (a, b) in d_hmix.iter_mut().zip(&dln) {
            *a += b;
        }

        // mixer: h_mix = h_in + depthwise(h_in) Wp + bp
        let mut d_hin = d_hmix.clone();
        matmul_at_acc(&cache.conv, &d_hmix, &mut grad[li.pw..li.pw + c * c], tokens, c, c);
        bias_grad(&d_hmix, &mut grad[li.pw_b..li.pw_b + c]);
        let mut d_conv = vec![0.0; tokens * c];
        matmul_bt_acc(&d_hmix, v.t(li.pw, c * c), &mut d_conv, tokens, c, c);
        let dd = depthwise_backward(&d_conv, &cache.h_in, v.t(li.dw, c * 9), geo, c, &mut grad[li.dw..li.dw + c * 9]);
        for (a, b) in d_hin.iter_mut().zip(&dd) {
            *a += b;
        }
        d_hin
    }

    /// Projection to one channel, bilinear upsampling and the input residual.
    fn decode(&self, h: &[f64], input: &InvClip, geo: &Geometry) -> Result<InvClip> {
        let c = self.cfg().channels;
        let v = Views { p: &self.params.values };
        let (w_out, b_out) = (v.t(self.idx.out_w, c), v.t(self.idx.out_b, 1)[0]);
        let y: Vec<f64> = h
            .chunks(c)
            .map(|row| row.iter().zip(w_out).map(|(a, b)| a * b).sum::<f64>() + b_out)
            .collect();
        let p = self.cfg().patch;
        let (rt, ct) = (upsample_taps(geo.grid_h, p), upsample_taps(geo.grid_w, p));
        let s = geo.sites();
        let frames = input
            .frames()
            .iter()
            .enumerate()
            .map(|(n, f)| {
                let mut values = Vec::with_capacity(f.len());
                for (r, rtap) in rt.iter().enumerate() {
                    for (col, ctap) in ct.iter().enumerate() {
                        let mut up = 0.0;
                        for &(ri, rw) in rtap {
                            for &(ci, cw) in ctap {
                                up += rw * cw * y[n * s + ri * geo.grid_w + ci];
                            }
                        }
                        let i = r * geo.width + col;
                        let base = if self.cfg().residual_output { f.values()[i] } else { 0.0 };
                        values.push(if f.mask()[i] { base + up } else { f.values()[i] });
                    }
                }
                InvDepthFrame::new(geo.width, geo.height, values, f.mask().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        InvClip::new(frames, input.timeline().to_vec())
    }

    pub fn forward_cached(&self, input: &InvClip) -> Result<(InvClip, ForwardCache)> {
        let geo = self.geometry(input)?;
        let (pooled, inv_count) = pool(input, &geo, self.cfg().patch);
        let mut h = self.embed(&pooled, &geo);
        let mut layers = Vec::with_capacity(self.cfg().layers);
        for l in 0..self.cfg().layers {
            let cache = self.layer_forward(l, h, &geo);
            h = self.layer_output(l, &cache, geo.tokens());
            layers.push(cache);
        }
        let out = self.decode(&h, input, &geo)?;
        Ok((
            out,
            ForwardCache {
                geometry: geo,
                inv_count,
                pooled,
                layers,
                h_final: h,
                masks: input.frames().iter().map(|f| f.mask().to_vec()).collect(),
            },
        ))
    }

    /// Exact reverse-mode gradients given `d loss / d output` per frame.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[Vec<f64>]) -> Result<Gradients> {
        let geo = cache.geometry;
        let cfg = self.cfg();
        let c = cfg.channels;
        if upstream.len() != geo.frames || upstream.iter().any(|u| u.len() != geo.width * geo.height) {
            return Err(Error::shape("upstream gradient does not match the forward output"));
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut d_input: Vec<Vec<f64>> = upstream
            .iter()
            .zip(&cache.masks)
            .map(|(u, m)| u.iter().zip(m).map(|(&g, &mk)| if mk { g } else { 0.0 }).collect())
            .collect();
        if !cfg.residual_output {
            for d in d_input.iter_mut() {
                d.fill(0.0);
            }
        }

        // upsample backward
        let p = cfg.patch;
        let (rt, ct) = (upsample_taps(geo.grid_h, p), upsample_taps(geo.grid_w, p));
        let s = geo.sites();
        let mut dy = vec![0.0; geo.tokens()];
        for (n, (u, m)) in upstream.iter().zip(&cache.masks).enumerate() {
            for (r, rtap) in rt.iter().enumerate() {
                for (col, ctap) in ct.iter().enumerate() {
                    let i = r * geo.width + col;
                    if !m[i] {
                        continue;
                    }
                    for &(ri, rw) in rtap {
                        for &(ci, cw) in ctap {
                            dy[n * s + ri * geo.grid_w + ci] += rw * cw * u[i];
                        }
                    }
                }
            }
        }

        // output projection
        let w_out = &self.params.values[self.idx.out_w..self.idx.out_w + c];
        let mut dh = vec![0.0; geo.tokens() * c];
        for (t, &d) in dy.iter().enumerate() {
            for j in 0..c {
                grad[self.idx.out_w + j] += d * cache.h_final[t * c + j];
                dh[t * c + j] = d * w_out[j];
            }
            grad[self.idx.out_b] += d;
        }

        for l in (0..cfg.layers).rev() {
            dh = self.layer_backward(l, &cache.layers[l], &dh, &geo, &mut grad);
        }

        // embedding and pooling
        let lift_w = &self.params.values[self.idx.lift_w..self.idx.lift_w + c];
        for (t, &x) in cache.pooled.iter().enumerate() {
            let n = t / s;
            let mut dx = 0.0;
            for j in 0..c {
                let d = dh[t * c + j];
                grad[self.idx.lift_w + j] += d * x;
                grad[self.idx.lift_b + j] += d;
                grad[self.idx.pos + n * c + j] += d;
                dx += d * lift_w[j];
            }
            let inv = cache.inv_count[t];
            if inv == 0.0 {
                continue;
            }
            let (gr, gc) = ((t % s) / geo.grid_w, (t % s) % geo.grid_w);
            for r in gr * p..(gr + 1) * p {
                for col in gc * p..(gc + 1) * p {
                    let i = r * geo.width + col;
                    if cache.masks[n][i] {
                        d_input[n][i] += dx * inv;
                    }
                }
            }
        }
        Ok(Gradients {
            params: grad,
            input: d_input,
        })
    }
}

// ---------------------------------------------------------------------------
// per-layer probes

/// Result of one Jacobian-vector probe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerProbe {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Random-direction probes at every layer boundary: for a component
/// `y = f(x, θ)`, compares `<r, J [v_x; v_θ]>` by central differences with
/// `<Jᵀ r, [v_x; v_θ]>` from the backward pass.
pub fn layer_probes(params: &RefinerParams, input: &InvClip, seed: u64, h: f64) -> Result<Vec<LayerProbe>> {
    let refiner = Refiner::new(params);
    let geo = refiner.geometry(input)?;
    let (pooled, _) = pool(input, &geo, params.config.patch);
    let mut rng = stream_rng(seed, 0);
    let c = params.config.channels;
    let tokens = geo.tokens();
    let mut rand_vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect() };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut probes = Vec::new();
    let mut record = |name: String, analytic: f64, numeric: f64| {
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        probes.push(LayerProbe {
            name,
            analytic,
            numeric,
            rel_err: (analytic - numeric).abs() / denom,
        });
    };

    let mut h_in = refiner.embed(&pooled, &geo);
    let param_dir = rand_vec(params.len());
    for l in 0..params.config.layers {
        let x_dir = rand_vec(tokens * c);
        let r = rand_vec(tokens * c);
        let cache = refiner.layer_forward(l, h_in.clone(), &geo);
        let out = refiner.layer_output(l, &cache, tokens);
        let mut grad = vec![0.0; params.len()];
        let dx = refiner.layer_backward(l, &cache, &r, &geo, &mut grad);
        let analytic = dot(&dx, &x_dir) + dot(&grad, &param_dir);
        let eval = |eps: f64| -> f64 {
            let mut moved = params.clone();
            for (p, d) in moved.values.iter_mut().zip(&param_dir) {
                *p += eps * d;
            }
            let rf = Refiner::new(&moved);
            let x: Vec<f64> = h_in.iter().zip(&x_dir).map(|(a, b)| a + eps * b).collect();
            let cache = rf.layer_forward(l, x, &geo);
            dot(&rf.layer_output(l, &cache, tokens), &r)
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        record(format!("layer{l}"), analytic, numeric);
        h_in = out;
    }

    // whole network, parameter and input directions together
    let (out, cache) = refiner.forward_cached(input)?;
    let r: Vec<Vec<f64>> = out.frames().iter().map(|f| rand_vec(f.len())).collect();
    let x_dir: Vec<Vec<f64>> = out.frames().iter().map(|f| rand_vec(f.len())).collect();
    let grads = refiner.backward(&cache, &r)?;
    let analytic = dot(&grads.params, &param_dir) + grads.input.iter().zip(&x_dir).map(|(a, b)| dot(a, b)).sum::<f64>();
    let eval = |eps: f64| -> Result<f64> {
        let mut moved = params.clone();
        for (p, d) in moved.values.iter_mut().zip(&param_dir) {
            *p += eps * d;
        }
        let frames = input
            .frames()
            .iter()
            .zip(&x_dir)
            .map(|(f, d)| {
                let vals = f
                    .values()
                    .iter()
                    .zip(d)
                    .zip(f.mask())
                    .map(|((v, dv), &m)| if m { v + eps * dv } else { *v })
                    .collect();
                InvDepthFrame::new(f.width(), f.height(), vals, f.mask().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        let moved_in = InvClip::new(frames, input.timeline().to_vec())?;
        let y = Refiner::new(&moved).forward(&moved_in)?;
        Ok(y.frames().iter().zip(&r).map(|(f, rr)| dot(f.values(), rr)).sum())
    };
    // Directional derivative over masked coordinates only.
    let masked_analytic = {
        let masked: f64 = grads
            .input
            .iter()
            .zip(&x_dir)
            .zip(input.frames())
            .map(|((g, d), f)| {
                g.iter()
                    .zip(d)
                    .zip(f.mask())
                    .filter(|(_, &m)| m)
                    .map(|((a, b), _)| a * b)
                    .sum::<f64>()
            })
            .sum();
        analytic - grads.input.iter().zip(&x_dir).map(|(a, b)| dot(a, b)).sum::<f64>() + masked
    };
    let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
    record("network".into(), masked_analytic, numeric);
    Ok(probes)
}

/// Parameters with every bias, gain and output tensor drawn at random, so no
/// gradient path is dead at the zero/one initialisation.
pub fn randomized_params(cfg: &RefinerConfig, seed: u64) -> Result<RefinerParams> {
    let mut p = init_params(cfg)?;
    let mut rng = stream_rng(seed, 99);
    for t in p.tensors.clone() {
        if t.name.starts_with("out.") || t.name.contains(".b") || t.name.ends_with("_b") {
            for v in &mut p.values[t.range()] {
                *v = 0.3 * (rng.random::<f64>() * 2.0 - 1.0);
            }
        }
        if t.name.ends_with(".g") {
            for v in &mut p.values[t.range()] {
                *v = 1.0 + 0.3 * (rng.random::<f64>() * 2.0 - 1.0);
            }
        }
    }
    Ok(p)
}

/// Worst relative error of the parameter gradient of `<r, forward(x)>` over
/// `samples` random coordinates, against central differences.
pub fn param_gradient_check(params: &RefinerParams, input: &InvClip, samples: usize, h: f64, seed: u64) -> Result<FdReport> {
    param_gradient_check_with(params, input, samples, h, seed, |_| {})
}

/// As [`param_gradient_check`], with `tamper` applied to the analytic
/// gradient first. Used to show that the check detects a wrong backward.
pub fn param_gradient_check_with(
    params: &RefinerParams,
    input: &InvClip,
    samples: usize,
    h: f64,
    seed: u64,
    tamper: impl FnOnce(&mut [f64]),
) -> Result<FdReport> {
    let mut rng = stream_rng(seed, 0);
    let r: Vec<Vec<f64>> = input
        .frames()
        .iter()
        .map(|f| (0..f.len()).map(|_| rng.random::<f64>() - 0.5).collect())
        .collect();
    let objective = |p: &RefinerParams| -> Result<f64> {
        let y = Refiner::new(p).forward(input)?;
        Ok(y.frames()
            .iter()
            .zip(&r)
            .map(|(f, rr)| f.values().iter().zip(rr).map(|(a, b)| a * b).sum::<f64>())
            .sum())
    };
    let rf = Refiner::new(params);
    let (_, cache) = rf.forward_cached(input)?;
    let mut g = rf.backward(&cache, &r)?.params;
    tamper(&mut g);
    let mut rep = FdReport {
        max_rel_err: 0.0,
        pass: true,
        checked: 0,
        skipped: 0,
    };
    let mut moved = params.clone();
    for _ in 0..samples {
        let i = rng.random_range(0..params.len());
        moved.values[i] = params.values[i] + h;
        let plus = objective(&moved)?;
        moved.values[i] = params.values[i] - h;
        let minus = objective(&moved)?;
        moved.values[i] = params.values[i];
        let numeric = (plus - minus) / (2.0 * h);
        let err = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(1e-6);
        rep.max_rel_err = rep.max_rel_err.max(err);
        rep.checked += 1;
    }
    rep.pass = rep.max_rel_err < 1e-3;
    Ok(rep)
}
