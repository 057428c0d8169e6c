//! Command-line front end. [`run`] parses arguments, dispatches to one
//! subcommand and maps the outcome onto an exit code: 0 success, 1 usage or
//! configuration, 2 data, 3 numerical failure.
//!
//! Every output directory is filled in a temporary sibling and renamed into
//! place, so a failing command leaves nothing behind.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::frame::{
    clip_to_depth, clip_to_inverse, CameraIntrinsics, Clip, Domain, FlowField, Frame, InvClip, InvDepthFrame, Inverse, Metric, MetricClip,
    Pose,
};
use crate::head::checkpoint::{self, Checkpoint};
use crate::head::train::{evaluate_heldout, train_refiner, DataConfig, StepRecord, TrainConfig, TrainState};
use crate::head::{layer_probes, param_gradient_check_with, randomized_params, Refiner, RefinerConfig, RefinerParams};
use crate::io::{
    encode_pgm, flow_file_name, frame_file_name, peek_vdr1_domain, read_intrinsics, read_json, read_poses, read_vdr1, write_dir_atomic,
    write_intrinsics, write_json, write_poses, write_vdr1, write_vdr2,
};
use crate::losses::{
    finite_diff_check, opw_loss, se_loss, ssi_loss, tgm_loss, total_loss, video_align_loss, FdOptions, LossResult, LossVariant,
    LossWeights, TgmThreshold,
};
use crate::metrics::{evaluate_video, profile_to_gray, temporal_profile, Cameras, EvalReport, INVERSE_EPS};
use crate::stitcher::{infer_long, ClipSpec, PassThrough, StitchConfig, Strategy, WindowLog, WindowedFlicker};
use crate::synth::{all_flows, flicker_predictor, generate_scene, stream_rng, FlickerParams, SceneConfig, RNG_NAME};

pub const MANIFEST: &str = "manifest.json";
pub const POSES: &str = "poses.json";
pub const INTRINSICS: &str = "intrinsics.json";
pub const CHECKPOINT: &str = "checkpoint.vdck";
pub const HISTORY: &str = "history.jsonl";

#[derive(Debug, Parser)]
#[command(name = "vdc", version, about = "Temporally consistent video depth toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic sequence with depth, flow, poses and intrinsics.
    Synth(SynthArgs),
    /// Run a clip predictor over a long video with a stitching strategy.
    Infer(InferArgs),
    /// Train the temporal refiner on flickered synthetic clips.
    Train(TrainArgs),
    /// Score a prediction against ground truth.
    Eval(EvalArgs),
    /// Run a strategy or loss ablation grid.
    Ablate(AblateArgs),
    /// Finite-difference checks of every loss and the refiner.
    Gradcheck(GradcheckArgs),
    /// Export a temporal profile (one column over time).
    Profile(ProfileArgs),
}

fn parse_res(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    Ok((w, h))
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Preset layout: forward, orbit, handheld or down.
    #[arg(long, conflicts_with = "config")]
    pub scene: Option<String>,
    /// Full scene description as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long, value_parser = parse_res)]
    pub res: Option<(usize, usize)>,
    #[arg(long, env = "VDC_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Sequence directory holding the ground truth the oracles perturb.
    #[arg(long)]
    pub input: PathBuf,
    /// gt, flicker, windowed-flicker or refiner:<checkpoint>.
    #[arg(long, default_value = "windowed-flicker")]
    pub predictor: String,
    /// JSON with optional `stitch` and `flicker` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub window_size: Option<usize>,
    #[arg(long)]
    pub overlap: Option<usize>,
    #[arg(long)]
    pub keyframes: Option<usize>,
    #[arg(long)]
    pub keyframe_stride: Option<usize>,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub sigma_scale: Option<f64>,
    #[arg(long)]
    pub sigma_shift: Option<f64>,
    #[arg(long)]
    pub sigma_pixel: Option<f64>,
    #[arg(long)]
    pub sigma_window_scale: Option<f64>,
    #[arg(long)]
    pub sigma_window_shift: Option<f64>,
    #[arg(long, env = "VDC_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    Strategy::parse(s).ok_or_else(|| format!("unknown strategy {s:?} (baseline, oa, oi, oi-kr)"))
}

fn parse_variant(s: &str) -> std::result::Result<LossVariant, String> {
    LossVariant::parse(s).ok_or_else(|| {
        let names: Vec<&str> = LossVariant::ALL.iter().map(|v| v.label()).collect();
        format!("unknown loss {s:?} ({})", names.join(", "))
    })
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON with optional `refiner`, `train` and `data` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Stop after this many completed steps (the schedule still spans `--steps`).
    #[arg(long)]
    pub until: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_parser = parse_variant)]
    pub loss: Option<LossVariant>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub clip_len: Option<usize>,
    /// Training clip length.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long, value_parser = parse_res)]
    pub res: Option<(usize, usize)>,
    #[arg(long, env = "VDC_SEED")]
    pub seed: Option<u64>,
    /// Continue from a checkpoint; its sibling history is carried over.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Report file. Defaults to `eval.json` next to the prediction frames.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, env = "VDC_SEED")]
    pub seed: Option<u64>,
    /// Directory for table.md and table.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, env = "VDC_SEED")]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Flip the sign of one analytic gradient to show that the check fails.
    #[arg(long)]
    pub inject_sign_error: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub column: usize,
    /// Also write an 8-bit PGM preview.
    #[arg(long)]
    pub pgm: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::Collision { .. } => 1,
        Error::NonFinite { .. } => 3,
        Error::Predictor { source, .. } => exit_code(source),
        _ => 2,
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth(a) => cmd_synth(&a).map(|_| 0),
        Command::Infer(a) => cmd_infer(&a).map(|_| 0),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a).map(|_| 0),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| 0),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Profile(a) => cmd_profile(&a).map(|_| 0),
    }
}

// ---------------------------------------------------------------------------
// manifests

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainName {
    Metric,
    Inverse,
}

impl DomainName {
    fn flag(self) -> u8 {
        match self {
            DomainName::Metric => Metric::FLAG,
            DomainName::Inverse => Inverse::FLAG,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub name: String,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    pub domain: DomainName,
    pub depth: Vec<String>,
    #[serde(default)]
    pub flow: Vec<String>,
    #[serde(default)]
    pub poses: Option<String>,
    #[serde(default)]
    pub intrinsics: Option<String>,
    pub seed: u64,
    pub rng: String,
    /// Effective configuration of whatever produced the directory.
    #[serde(default)]
    pub generator: Value,
}

/// A sequence directory read back through its manifest.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub dir: PathBuf,
    pub manifest: SequenceManifest,
    pub inverse: InvClip,
    /// Present when the frames are stored as metric depth.
    pub metric: Option<MetricClip>,
    pub poses: Option<Vec<Pose>>,
    pub intrinsics: Option<CameraIntrinsics>,
}

impl Sequence {
    /// Metric depth, converting stored inverse depth if needed.
    pub fn metric_depth(&self) -> Result<MetricClip> {
        match &self.metric {
            Some(m) => Ok(m.clone()),
            None => clip_to_depth(&self.inverse, INVERSE_EPS),
        }
    }

    pub fn cameras(&self) -> Option<Cameras<'_>> {
        match (&self.poses, &self.intrinsics) {
            (Some(poses), Some(intrinsics)) => Some(Cameras { poses, intrinsics }),
            _ => None,
        }
    }
}

fn read_frames<D: Domain>(dir: &Path, names: &[String]) -> Result<Clip<D>> {
    Clip::from_frames(
        names
            .iter()
            .map(|n| read_vdr1::<D>(&dir.join(n)))
            .collect::<Result<Vec<Frame<D>>>>()?,
    )
}

fn optional_sidecar<T>(dir: &Path, name: &Option<String>, read: impl Fn(&Path) -> Result<T>) -> Result<Option<T>> {
    let Some(name) = name else { return Ok(None) };
    let path = dir.join(name);
    if !path.exists() {
        log::warn!("{} is listed in the manifest but missing; continuing without it", path.display());
        return Ok(None);
    }
    read(&path).map(Some)
}

/// Reads and checks a sequence directory: every listed frame exists and
/// parses with the declared domain and size, and the directory holds exactly
/// `frame_count` frame files.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let mpath = dir.join(MANIFEST);
    if !mpath.is_file() {
        return Err(Error::format(&mpath, "missing; not a sequence directory"));
    }
    let manifest: SequenceManifest = read_json(&mpath)?;
    let bad = |msg: String| Error::format(&mpath, msg);
    if manifest.depth.len() != manifest.frame_count {
        return Err(bad(format!(
            "frame_count {} but {} depth files listed",
            manifest.frame_count,
            manifest.depth.len()
        )));
    }
    let on_disk = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let n = e.file_name();
            let n = n.to_string_lossy();
            n.starts_with("frame_") && n.ends_with(".vdr")
        })
        .count();
    if on_disk != manifest.frame_count {
        return Err(bad(format!(
            "frame_count {} but {on_disk} frame files on disk",
            manifest.frame_count
        )));
    }
    for name in &manifest.depth {
        let flag = peek_vdr1_domain(&dir.join(name))?;
        if flag != manifest.domain.flag() {
            return Err(bad(format!("{name} has domain flag {flag}, manifest says {:?}", manifest.domain)));
        }
    }
    let (inverse, metric) = match manifest.domain {
        DomainName::Metric => {
            let m: MetricClip = read_frames(dir, &manifest.depth)?;
            (clip_to_inverse(&m, INVERSE_EPS)?, Some(m))
        }
        DomainName::Inverse => (read_frames::<Inverse>(dir, &manifest.depth)?, None),
    };
    if inverse.dims() != (manifest.width, manifest.height) {
        return Err(bad(format!(
            "frames are {:?}, manifest says {}x{}",
            inverse.dims(),
            manifest.width,
            manifest.height
        )));
    }
    let poses = optional_sidecar(dir, &manifest.poses, read_poses)?;
    if let Some(p) = &poses {
        if p.len() != manifest.frame_count {
            return Err(bad(format!("{} poses for {} frames", p.len(), manifest.frame_count)));
        }
    }
    let intrinsics = optional_sidecar(dir, &manifest.intrinsics, read_intrinsics)?;
    Ok(Sequence {
        dir: dir.to_path_buf(),
        manifest,
        inverse,
        metric,
        poses,
        intrinsics,
    })
}

fn write_frames<D: Domain>(dir: &Path, clip: &Clip<D>) -> Result<Vec<String>> {
    clip.frames()
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let name = frame_file_name(i);
            write_vdr1(&dir.join(&name), f)?;
            Ok(name)
        })
        .collect()
}

fn write_flows(dir: &Path, flows: &[FlowField]) -> Result<Vec<String>> {
    flows
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let name = flow_file_name(i);
            write_vdr2(&dir.join(&name), f)?;
            Ok(name)
        })
        .collect()
}

fn read_section<T: serde::de::DeserializeOwned + Default>(root: &Value, key: &str, path: &Path) -> Result<T> {
    match root.get(key) {
        None | Some(Value::Null) => Ok(T::default()),
        Some(v) => T::deserialize(v).map_err(|e| Error::config(format!("{}: section {key}: {e}", path.display()))),
    }
}

fn read_config(path: &Option<PathBuf>) -> Result<(Value, PathBuf)> {
    match path {
        None => Ok((Value::Null, PathBuf::new())),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            let v: Value = serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
            Ok((v, p.clone()))
        }
    }
}

// ---------------------------------------------------------------------------
// synth

pub fn synth_config(a: &SynthArgs) -> Result<(String, SceneConfig)> {
    let (w, h) = a.res.unwrap_or((128, 128));
    let frames = a.frames.unwrap_or(64);
    let seed = a.seed.unwrap_or(0);
    match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let mut cfg: SceneConfig = serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            if let Some(n) = a.frames {
                cfg.frame_count = n;
            }
            if let Some((nw, nh)) = a.res {
                let sx = nw as f64 / cfg.width as f64;
                let sy = nh as f64 / cfg.height as f64;
                let k = cfg.intrinsics;
                cfg.intrinsics = CameraIntrinsics::new(k.fx * sx, k.fy * sy, k.cx * sx, k.cy * sy)?;
                cfg.width = nw;
                cfg.height = nh;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "scene".into());
            Ok((name, cfg))
        }
        None => {
            let name = a.scene.clone().unwrap_or_else(|| "forward".into());
            let cfg = SceneConfig::preset(&name, frames, w, h, seed)?;
            Ok((name, cfg))
        }
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let (name, cfg) = synth_config(a)?;
    log::info!(
        "synth {name}: {} frames at {}x{}, seed {}",
        cfg.frame_count,
        cfg.width,
        cfg.height,
        cfg.seed
    );
    let seq = generate_scene(&cfg)?;
    let flows = all_flows(&seq)?;
    write_dir_atomic(&a.out, |dir| {
        let depth = write_frames(dir, &seq.depth)?;
        let flow = write_flows(dir, &flows)?;
        write_poses(&dir.join(POSES), &seq.poses)?;
        write_intrinsics(&dir.join(INTRINSICS), &seq.intrinsics)?;
        let manifest = SequenceManifest {
            name,
            frame_count: seq.len(),
            width: cfg.width,
            height: cfg.height,
            domain: DomainName::Metric,
            depth,
            flow,
            poses: Some(POSES.into()),
            intrinsics: Some(INTRINSICS.into()),
            seed: cfg.seed,
            rng: RNG_NAME.into(),
            generator: json!({ "command": "synth", "scene": cfg }),
        };
        write_json(&dir.join(MANIFEST), &manifest)
    })
}

// ---------------------------------------------------------------------------
// infer

/// Noise defaults of the oracle predictors used by `infer`.
pub fn default_infer_flicker() -> FlickerParams {
    FlickerParams {
        sigma_scale: 0.1,
        sigma_shift: 0.02,
        sigma_pixel: 0.002,
        sigma_window_scale: 0.05,
        sigma_window_shift: 0.01,
        seed: 0,
    }
}

/// Effective stitching and noise settings: flags over config file over
/// built-in defaults.
pub fn infer_settings(a: &InferArgs) -> Result<(StitchConfig, FlickerParams)> {
    let (root, path) = read_config(&a.config)?;
    let mut stitch: StitchConfig = read_section(&root, "stitch", &path)?;
    let mut flicker = match root.get("flicker") {
        None | Some(Value::Null) => default_infer_flicker(),
        Some(_) => read_section(&root, "flicker", &path)?,
    };
    if let Some(v) = a.window_size {
        stitch.window = v;
    }
    if let Some(v) = a.overlap {
        stitch.overlap = v;
    }
    if let Some(v) = a.keyframes {
        stitch.keyframes = v;
    }
    if let Some(v) = a.keyframe_stride {
        stitch.keyframe_stride = v;
    }
    if let Some(v) = a.strategy {
        stitch.strategy = v;
    }
    let set = |dst: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut flicker.sigma_scale, a.sigma_scale);
    set(&mut flicker.sigma_shift, a.sigma_shift);
    set(&mut flicker.sigma_pixel, a.sigma_pixel);
    set(&mut flicker.sigma_window_scale, a.sigma_window_scale);
    set(&mut flicker.sigma_window_shift, a.sigma_window_shift);
    if let Some(s) = a.seed {
        flicker.seed = s;
    }
    stitch.validate()?;
    flicker.validate()?;
    Ok((stitch, flicker))
}

#[derive(Debug, Serialize)]
struct InferLog<'a> {
    command: &'static str,
    input: String,
    predictor: &'a str,
    stitch: &'a StitchConfig,
    flicker: &'a FlickerParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    refiner: Option<&'a RefinerConfig>,
    windows: &'a [WindowLog],
}

fn load_refiner(path: &Path, window: usize) -> Result<RefinerParams> {
    let ck = checkpoint::load(path)?;
    let p = ck.state.params;
    if window > p.config.clip_len {
        return Err(Error::config(format!(
            "window size {window} exceeds the refiner's clip length {}",
            p.config.clip_len
        )));
    }
    Ok(p)
}

pub fn cmd_infer(a: &InferArgs) -> Result<()> {
    let (stitch, flicker) = infer_settings(a)?;
    let seq = load_sequence(&a.input)?;
    let gt = &seq.inverse;
    let as_clip =
        |spec: &ClipSpec, frames: &[&InvDepthFrame]| InvClip::new(frames.iter().map(|f| (*f).clone()).collect(), spec.frame_indices());
    let mut refiner_cfg = None;
    let out = match a.predictor.as_str() {
        "gt" => infer_long(&mut PassThrough, gt.frames(), &stitch)?,
        "windowed-flicker" => infer_long(&mut WindowedFlicker { params: flicker }, gt.frames(), &stitch)?,
        "flicker" => {
            let mut p = |spec: &ClipSpec, frames: &[&InvDepthFrame]| flicker_predictor(&as_clip(spec, frames)?, &flicker);
            infer_long(&mut p, gt.frames(), &stitch)?
        }
        other => {
            let Some(ck) = other.strip_prefix("refiner:") else {
                return Err(Error::config(format!(
                    "unknown predictor {other:?} (gt, flicker, windowed-flicker, refiner:<checkpoint>)"
                )));
            };
            let params = load_refiner(Path::new(ck), stitch.window)?;
            refiner_cfg = Some(params.config);
            let noisy = flicker_predictor(gt, &flicker)?;
            let refiner = Refiner::new(&params);
            let mut p = |spec: &ClipSpec, frames: &[&InvDepthFrame]| refiner.forward(&as_clip(spec, frames)?);
            infer_long(&mut p, noisy.frames(), &stitch)?
        }
    };
    for w in &out.windows {
        for msg in &w.alignment.warnings {
            log::warn!("window {}: {msg}", w.ordinal);
        }
    }
    log::info!(
        "infer: {} frames in {} windows ({})",
        out.video.len(),
        out.windows.len(),
        stitch.strategy.label()
    );
    write_dir_atomic(&a.out, |dir| {
        let depth = write_frames(dir, &out.video)?;
        let manifest = SequenceManifest {
            name: format!("{}-{}", seq.manifest.name, stitch.strategy.label()),
            frame_count: out.video.len(),
            width: seq.manifest.width,
            height: seq.manifest.height,
            domain: DomainName::Inverse,
            depth,
            flow: Vec::new(),
            poses: None,
            intrinsics: None,
            seed: flicker.seed,
            rng: RNG_NAME.into(),
            generator: json!({
                "command": "infer",
                "input": a.input.display().to_string(),
                "predictor": a.predictor,
                "stitch": stitch,
                "flicker": flicker,
            }),
        };
        write_json(&dir.join(MANIFEST), &manifest)?;
        let log = InferLog {
            command: "infer",
            input: a.input.display().to_string(),
            predictor: &a.predictor,
            stitch: &stitch,
            flicker: &flicker,
            refiner: refiner_cfg.as_ref(),
            windows: &out.windows,
        };
        write_json(&dir.join("run_log.json"), &log)
    })
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub refiner: RefinerConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub until: Option<usize>,
    pub resume: Option<String>,
}

/// Effective training settings. On resume the checkpoint's own settings
/// replace the built-in defaults; the model shape always comes from it.
pub fn train_settings(a: &TrainArgs, resumed: Option<&Checkpoint>) -> Result<TrainSettings> {
    let (root, path) = read_config(&a.config)?;
    let mut refiner: RefinerConfig = read_section(&root, "refiner", &path)?;
    let mut train: TrainConfig = read_section(&root, "train", &path)?;
    let mut data: DataConfig = read_section(&root, "data", &path)?;
    if let Some(ck) = resumed {
        refiner = ck.header.config;
        if root.get("train").is_none() {
            train = ck.header.train.clone().unwrap_or_default();
        }
        if root.get("data").is_none() {
            data = ck.header.data.clone().unwrap_or_default();
        }
    }
    let model_flags = [
        (a.channels, &mut refiner.channels),
        (a.heads, &mut refiner.heads),
        (a.layers, &mut refiner.layers),
        (a.patch, &mut refiner.patch),
        (a.clip_len, &mut refiner.clip_len),
    ];
    for (flag, dst) in model_flags {
        if let Some(v) = flag {
            if resumed.is_some() && *dst != v {
                return Err(Error::config("model shape flags must match the resumed checkpoint"));
            }
            *dst = v;
        }
    }
    if let Some(v) = a.steps {
        train.steps = v;
    }
    if let Some(v) = a.lr {
        train.lr = v;
    }
    if let Some(v) = a.alpha {
        train.weights.alpha = v;
    }
    if let Some(v) = a.beta {
        train.weights.beta = v;
    }
    if let Some(v) = a.batch {
        train.batch = v;
    }
    if let Some(v) = a.tau {
        train.tau = v;
    }
    if let Some(v) = a.loss {
        train.variant = v;
    }
    if let Some(v) = a.frames {
        data.frames = v;
    }
    if let Some((w, h)) = a.res {
        data.width = w;
        data.height = h;
    }
    if let Some(s) = a.seed {
        train.seed = s;
        if resumed.is_none() {
            refiner.seed = s;
        }
    }
    if data.frames > refiner.clip_len {
        return Err(Error::config(format!(
            "training clips of {} frames exceed the refiner's clip length {}",
            data.frames, refiner.clip_len
        )));
    }
    refiner.validate()?;
    train.validate()?;
    data.flicker.validate()?;
    Ok(TrainSettings {
        refiner,
        train,
        data,
        until: a.until,
        resume: a.resume.as_ref().map(|p| p.display().to_string()),
    })
}

fn history_prefix(ckpt: &Path, steps: usize) -> Result<Vec<String>> {
    let path = ckpt.with_file_name(HISTORY);
    if !path.exists() {
        if steps > 0 {
            log::warn!("no {HISTORY} next to {}; history restarts at step {steps}", ckpt.display());
        }
        return Ok(Vec::new());
    }
    let lines: Vec<String> = fs::read_to_string(&path)?.lines().take(steps).map(str::to_string).collect();
    Ok(lines)
}

fn history_line(rec: &StepRecord) -> Result<String> {
    Ok(serde_json::to_string(rec)?)
}

pub fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let resumed = a.resume.as_deref().map(checkpoint::load).transpose()?;
    let s = train_settings(a, resumed.as_ref())?;
    let mut lines = match (&a.resume, &resumed) {
        (Some(p), Some(ck)) => history_prefix(p, ck.state.step)?,
        _ => Vec::new(),
    };
    let mut state = match resumed {
        Some(ck) => ck.state,
        None => TrainState::new(&s.refiner)?,
    };
    log::info!(
        "train: {} steps from {}, lr {:.1e}, alpha {}, beta {}, loss {}",
        s.train.steps,
        state.step,
        s.train.lr,
        s.train.weights.alpha,
        s.train.weights.beta,
        s.train.variant.label()
    );
    // A failed step leaves the state as it was before that step.
    let outcome = match train_refiner(&mut state, &s.train, &s.data, s.until.unwrap_or(usize::MAX), |rec| {
        lines.push(history_line(rec)?);
        Ok(())
    }) {
        Ok(_) => Ok(()),
        Err(e @ Error::NonFinite { .. }) => Err(e),
        Err(e) => return Err(e),
    };
    let failed = outcome.as_ref().err().map(|e| e.to_string());
    write_dir_atomic(&a.out, |dir| {
        let ck = Checkpoint::new(state, Some(s.train.clone()), Some(s.data.clone()));
        let name = if failed.is_some() { "snapshot.vdck" } else { CHECKPOINT };
        checkpoint::save(&dir.join(name), &ck)?;
        let mut text = lines.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(dir.join(HISTORY), text)?;
        write_json(&dir.join("config.json"), &s)?;
        if let Some(msg) = &failed {
            write_json(&dir.join("failure.json"), &json!({ "error": msg }))?;
        }
        Ok(())
    })?;
    match outcome {
        Ok(()) => Ok(0),
        Err(e) => {
            eprintln!("error: {e}; snapshot written to {}", a.out.display());
            Ok(3)
        }
    }
}

// ---------------------------------------------------------------------------
// eval

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport> {
    let pred = load_sequence(&a.pred)?;
    let gt = load_sequence(&a.gt)?;
    let depth = gt.metric_depth()?;
    let cams = gt.cameras();
    if cams.is_none() {
        log::warn!("ground truth has no poses or intrinsics; TAE is reported as null");
    }
    let report = evaluate_video(&pred.inverse, depth.frames(), cams)?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    let out = a.out.clone().unwrap_or_else(|| a.pred.join("eval.json"));
    write_json(&out, &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// ablate

/// Strategy × window-size grid on one synthetic scene with the windowed
/// flicker oracle. Overlap is a quarter of the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyGrid {
    pub strategies: Vec<Strategy>,
    pub windows: Vec<usize>,
    pub keyframes: usize,
    pub keyframe_stride: usize,
    pub scene: String,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub flicker: FlickerParams,
    pub seeds: Vec<u64>,
}

impl Default for StrategyGrid {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
            windows: vec![16, 32],
            keyframes: 2,
            keyframe_stride: 12,
            scene: "orbit".into(),
            frames: 120,
            width: 32,
            height: 32,
            flicker: FlickerParams {
                sigma_pixel: 0.001,
                sigma_window_scale: 0.05,
                sigma_window_shift: 0.01,
                ..FlickerParams::default()
            },
            seeds: vec![0],
        }
    }
}

/// One refiner training run per loss variant, scored on held-out clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossGrid {
    pub variants: Vec<LossVariant>,
    pub refiner: RefinerConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub heldout_clips: usize,
    pub seeds: Vec<u64>,
}

impl Default for LossGrid {
    fn default() -> Self {
        Self {
            variants: LossVariant::ALL.to_vec(),
            refiner: RefinerConfig {
                clip_len: 16,
                channels: 16,
                heads: 2,
                patch: 8,
                ..RefinerConfig::default()
            },
            train: TrainConfig {
                steps: 300,
                lr: 1e-3,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
            heldout_clips: 8,
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSpec {
    pub strategy_grid: Option<StrategyGrid>,
    pub loss_grid: Option<LossGrid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateRow {
    pub group: String,
    pub label: String,
    pub seeds: Vec<u64>,
    pub absrel: Option<f64>,
    pub delta1: Option<f64>,
    pub tae: Option<f64>,
    pub error: Option<String>,
}

fn mean_row(group: &str, label: String, seeds: &[u64], runs: Result<Vec<[f64; 3]>>) -> AblateRow {
    let mut row = AblateRow {
        group: group.into(),
        label,
        seeds: seeds.to_vec(),
        absrel: None,
        delta1: None,
        tae: None,
        error: None,
    };
    match runs {
        Ok(v) if !v.is_empty() => {
            let n = v.len() as f64;
            let m = |k: usize| v.iter().map(|r| r[k]).sum::<f64>() / n;
            row.absrel = Some(m(0));
            row.delta1 = Some(m(1));
            row.tae = Some(m(2)).filter(|t| t.is_finite());
        }
        Ok(_) => row.error = Some("no seeds".into()),
        Err(e) => {
            log::warn!("{} row {} failed: {e}", row.group, row.label);
            row.error = Some(e.to_string());
        }
    }
    row
}

fn strategy_run(grid: &StrategyGrid, cfg: &StitchConfig, seed: u64) -> Result<[f64; 3]> {
    let scene = SceneConfig::preset(&grid.scene, grid.frames, grid.width, grid.height, seed)?;
    let seq = generate_scene(&scene)?;
    let gt = seq.inverse()?;
    let params = FlickerParams { seed, ..grid.flicker };
    let out = infer_long(&mut WindowedFlicker { params }, gt.frames(), cfg)?;
    let cams = Cameras {
        poses: &seq.poses,
        intrinsics: &seq.intrinsics,
    };
    let r = evaluate_video(&out.video, seq.depth.frames(), Some(cams))?;
    Ok([r.absrel, r.delta1, r.tae.unwrap_or(f64::NAN)])
}

fn loss_run(grid: &LossGrid, variant: LossVariant, seed: u64) -> Result<[f64; 3]> {
    let refiner = RefinerConfig { seed, ..grid.refiner };
    let train = TrainConfig {
        seed,
        variant,
        ..grid.train.clone()
    };
    let mut state = TrainState::new(&refiner)?;
    train_refiner(&mut state, &train, &grid.data, usize::MAX, |_| Ok(()))?;
    let r = evaluate_heldout(&state.params, &grid.data, seed ^ 0x5eed, grid.heldout_clips)?;
    Ok([r.refined_absrel, r.refined_delta1, r.refined_tae])
}

pub fn run_ablation(spec: &AblateSpec, seed_override: Option<u64>) -> Vec<AblateRow> {
    let mut rows = Vec::new();
    if let Some(grid) = &spec.strategy_grid {
        let seeds = seed_override.map(|s| vec![s]).unwrap_or_else(|| grid.seeds.clone());
        for &window in &grid.windows {
            for &strategy in &grid.strategies {
                let cfg = StitchConfig {
                    window,
                    overlap: (window / 4).max(1),
                    keyframes: grid.keyframes,
                    keyframe_stride: grid.keyframe_stride,
                    strategy,
                };
                let label = format!("{} N={window}", strategy.label());
                let runs = cfg
                    .validate()
                    .and_then(|_| seeds.iter().map(|&s| strategy_run(grid, &cfg, s)).collect());
                rows.push(mean_row("strategy", label, &seeds, runs));
            }
        }
    }
    if let Some(grid) = &spec.loss_grid {
        let seeds = seed_override.map(|s| vec![s]).unwrap_or_else(|| grid.seeds.clone());
        for &variant in &grid.variants {
            let runs = seeds.iter().map(|&s| loss_run(grid, variant, s)).collect();
            rows.push(mean_row("loss", variant.label().into(), &seeds, runs));
        }
    }
    rows
}

pub fn ablation_markdown(rows: &[AblateRow]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    let mut out = String::from("| group | configuration | seeds | AbsRel | δ1 | TAE | status |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let status = match &r.error {
            None => "ok".to_string(),
            Some(e) => format!("failed: {}", e.replace('|', "/")),
        };
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            r.group,
            r.label,
            seeds.join(","),
            fmt(r.absrel),
            fmt(r.delta1),
            fmt(r.tae),
            status
        ));
    }
    out
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<Vec<AblateRow>> {
    let text = fs::read_to_string(&a.spec)?;
    let spec: AblateSpec = serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", a.spec.display())))?;
    let rows = run_ablation(&spec, a.seed);
    let md = ablation_markdown(&rows);
    print!("{md}");
    if let Some(out) = &a.out {
        write_dir_atomic(out, |dir| {
            fs::write(dir.join("table.md"), &md)?;
            write_json(&dir.join("table.json"), &json!({ "spec": spec, "rows": rows }))
        })?;
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// gradcheck

/// Gradient-check tolerances: losses against central differences, and the
/// refiner's per-layer probes and parameter gradient.
pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const REFINER_TOLERANCE: f64 = 1e-3;

pub const LOSS_TARGETS: [&str; 6] = ["ssi", "opw", "se", "tgm", "video_align", "total"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradTarget {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    pub skipped: usize,
    pub pass: bool,
}

/// Smooth ground truth with small frame-to-frame changes, a nonlinear
/// distortion of it as prediction, and random sub-pixel flows.
pub fn gradcheck_fixture(seed: u64, frames: usize, width: usize, height: usize) -> Result<(InvClip, InvClip, Vec<FlowField>)> {
    let mut rng = stream_rng(seed, 0x6c);
    let base: Vec<f64> = (0..width * height).map(|_| rng.random::<f64>()).collect();
    let gt = (0..frames)
        .map(|k| {
            let v = base.iter().map(|b| b + 0.003 * k as f64 + 0.004 * rng.random::<f64>()).collect();
            InvDepthFrame::dense(width, height, v)
        })
        .collect::<Result<Vec<_>>>()?;
    let pred = gt
        .iter()
        .map(|g| g.map_valid(|v| 0.8 * v + 0.1 + 0.02 * (v * 37.0).sin()))
        .collect::<Result<Vec<_>>>()?;
    let flows = (1..frames)
        .map(|_| {
            let vecs = (0..width * height)
                .map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
                .collect();
            FlowField::new(width, height, vecs, vec![true; width * height])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((InvClip::from_frames(pred)?, InvClip::from_frames(gt)?, flows))
}

fn target_loss<'a>(name: &str, gt: &'a InvClip, flows: &'a [FlowField]) -> Result<Box<dyn Fn(&InvClip) -> Result<LossResult> + 'a>> {
    let thresh = TgmThreshold::default();
    Ok(match name {
        "ssi" => Box::new(move |p| ssi_loss(p, gt)),
        "opw" => Box::new(move |p| opw_loss(p, flows)),
        "se" => Box::new(move |p| se_loss(p, gt, flows)),
        "tgm" => Box::new(move |p| tgm_loss(p, gt, thresh)),
        "video_align" => Box::new(move |p| video_align_loss(p, gt)),
        "total" => Box::new(move |p| total_loss(p, gt, LossWeights::default(), thresh)),
        other => return Err(Error::config(format!("unknown gradient target {other:?}"))),
    })
}

/// Runs every gradient check. `inject` names one target whose analytic
/// gradient is negated before comparison (`refiner.params` for the refiner).
pub fn gradient_suite(seed: u64, samples: usize, inject: Option<&str>) -> Result<Vec<GradTarget>> {
    if let Some(t) = inject {
        if !LOSS_TARGETS.contains(&t) && t != "refiner.params" {
            return Err(Error::config(format!("cannot inject into {t:?}")));
        }
    }
    let (pred, gt, flows) = gradcheck_fixture(seed, 6, 8, 8)?;
    let opts = FdOptions {
        tol: LOSS_TOLERANCE,
        samples,
        seed,
        ..FdOptions::default()
    };
    let mut out = Vec::new();
    for name in LOSS_TARGETS {
        let loss = target_loss(name, &gt, &flows)?;
        let flip = inject == Some(name);
        let checked = move |p: &InvClip| -> Result<LossResult> {
            let mut r = loss(p)?;
            if flip {
                r.grad.iter_mut().flatten().for_each(|g| *g = -*g);
            }
            Ok(r)
        };
        let rep = finite_diff_check(checked, &pred, &opts)?;
        out.push(GradTarget {
            name: name.into(),
            max_rel_err: rep.max_rel_err,
            tol: LOSS_TOLERANCE,
            checked: rep.checked,
            skipped: rep.skipped,
            pass: rep.pass && rep.checked >= samples,
        });
    }

    let cfg = RefinerConfig {
        clip_len: 6,
        channels: 8,
        heads: 2,
        layers: 2,
        ffn_expansion: 2,
        patch: 2,
        seed,
        residual_output: true,
    };
    let params = randomized_params(&cfg, seed)?;
    let input = flicker_predictor(
        &gt.select(&[0, 1, 2, 3])?,
        &FlickerParams {
            sigma_scale: 0.1,
            sigma_shift: 0.02,
            sigma_pixel: 0.01,
            seed,
            ..FlickerParams::default()
        },
    )?;
    for probe in layer_probes(&params, &input, seed, 1e-5)? {
        out.push(GradTarget {
            name: format!("refiner.{}", probe.name),
            max_rel_err: probe.rel_err,
            tol: REFINER_TOLERANCE,
            checked: 1,
            skipped: 0,
            pass: probe.rel_err <= REFINER_TOLERANCE,
        });
    }
    let flip = inject == Some("refiner.params");
    let rep = param_gradient_check_with(&params, &input, samples, 1e-5, seed, |g| {
        if flip {
            g.iter_mut().for_each(|v| *v = -*v);
        }
    })?;
    out.push(GradTarget {
        name: "refiner.params".into(),
        max_rel_err: rep.max_rel_err,
        tol: REFINER_TOLERANCE,
        checked: rep.checked,
        skipped: 0,
        pass: rep.max_rel_err <= REFINER_TOLERANCE,
    });
    Ok(out)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let targets = gradient_suite(a.seed.unwrap_or(0), a.samples, a.inject_sign_error.as_deref())?;
    let ok = targets.iter().all(|t| t.pass);
    let report = json!({
        "seed": a.seed.unwrap_or(0),
        "samples": a.samples,
        "inject_sign_error": a.inject_sign_error,
        "pass": ok,
        "targets": targets,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    for t in targets.iter().filter(|t| !t.pass) {
        eprintln!("gradcheck failed: {} max_rel_err {:.3e} > {:.0e}", t.name, t.max_rel_err, t.tol);
    }
    Ok(if ok { 0 } else { 3 })
}

// ---------------------------------------------------------------------------
// profile

fn export_profile<D: Domain>(clip: &Clip<D>, column: usize, pgm: bool, out: &Path) -> Result<()> {
    let profile = temporal_profile(clip, column)?;
    write_dir_atomic(out, |dir| {
        write_vdr1(&dir.join("profile.vdr"), &profile)?;
        if pgm {
            let gray = profile_to_gray(&profile);
            fs::write(dir.join("profile.pgm"), encode_pgm(profile.width(), profile.height(), &gray))?;
        }
        Ok(())
    })
}

pub fn cmd_profile(a: &ProfileArgs) -> Result<()> {
    let seq = load_sequence(&a.input)?;
    match &seq.metric {
        Some(m) => export_profile(m, a.column, a.pgm, &a.out),
        None => export_profile(&seq.inverse, a.column, a.pgm, &a.out),
    }
}
