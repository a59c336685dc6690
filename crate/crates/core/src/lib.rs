//! Shared-noise ("sector-shaped") video diffusion.
//!
//! All frames of a clip are diffused with one shared noise tensor, so they
//! converge to a single noise point; generation runs one independent reverse
//! trajectory per frame from a common start, each guided by the clip's class
//! and that frame's flow field. The crate is `no_std` + `alloc`; file formats
//! and the command line live in the `s2dm` crate.

#![no_std]
#![forbid(unsafe_op_in_unsafe_fn)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod clip;
pub mod denoiser;
mod error;
pub mod eval;
pub mod guidance;
pub mod nn;
pub mod real;
pub mod rng;
pub mod schedule;
pub mod sector;
pub mod synthdata;
pub mod twostage;

pub use clip::{Clip, FlowCond, FlowField, FrameGeometry, LabeledClip, SemanticCond, TemporalCond};
pub use denoiser::{drop_conditions, Adam, DenoiserConfig, EpsBatch, EpsModel, FrameDenoiser};
pub use error::{CoreError, CoreResult};
pub use real::Real;
pub use rng::{Rng, StreamKey};
pub use schedule::NoiseSchedule;
