//! Depth completion from sparse range measurements: a sparse-to-dense network
//! with per-pixel log uncertainty, plug-and-play preprocessing for existing
//! backbones, uncertainty-weighted residual fusion, and KITTI-style metrics.

// `!(x > 0.0)` is used on purpose so NaN falls into the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod depthmap;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod spade;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorClass, Result};
