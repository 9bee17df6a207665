//! Differentiable order statistics, the dynamic stacking filter, flow-based
//! frame alignment and masked temporal median stacking for video deraining.
//!
//! The crate is organised bottom-up:
//!
//! * [`smooth_stats`] exact and softmax-smoothed min/max/median with analytic gradients
//! * [`dsf`] the dynamic stacking filter built on top of them
//! * [`frame_io`] images, frame sequences, Middlebury flow files and PSNR/SSIM
//! * [`flow_warp`] backward warping and the flow transfer loss
//! * [`stacking`] pseudo-label generation and every deraining loss term
//! * [`rain_synth`] deterministic scenes and rain streaks for testing
//! * [`model`] a forward-only toy-scale reference of the dual-branch network
//! * [`gradcheck`] the finite-difference harness shared by tests and the CLI

pub mod dsf;
pub mod error;
pub mod flow_warp;
pub mod frame_io;
pub mod gradcheck;
pub mod model;
pub mod rain_synth;
pub mod smooth_stats;
pub mod stacking;

pub use error::{Error, Result};
