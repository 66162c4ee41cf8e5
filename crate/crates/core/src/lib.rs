//! Underwater neural rendering pipeline: natural light field retention,
//! a multi-branch attention U-Net generator with its own reverse-mode
//! autodiff engine, the training losses, a physical-model baseline, and
//! the evaluation metric suite.

#![allow(clippy::needless_range_loop)]
// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod lightfield;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod physics;
pub mod runtime;
pub mod seed;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use types::{DepthMap, ImagePlane};
