//! Temporal-consistency toolkit for video depth.
//!
//! Losses that constrain depth changes along time, a temporal-attention
//! refiner trained with them, a key-frame/overlap stitcher for long videos,
//! the evaluation protocol (whole-video alignment, AbsRel, δ1, TAE), and a
//! synthetic ray-cast ground-truth generator that drives all of it.

pub mod align;
pub mod cli;
pub mod error;
pub mod frame;
pub mod head;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod stitcher;
pub mod synth;

pub use error::{Error, Result};
pub use frame::{
    AffineMap, CameraIntrinsics, Clip, FlowField, Frame, InvClip, InvDepthFrame, Inverse, Metric, MetricClip, MetricDepthFrame, Pose,
    VideoDepthClip,
};
