//! Parameter-efficient adaptation of multi-agent collaborative BEV detection.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`] – tensor primitives with hand-written gradients, Adam, gradient checking
//! * [`pipeline`] – encoder, attention fusion, detection heads and loss, wired end to end
//! * [`peft`] – collaboration adapter, agent prompt, baselines, freeze masks
//! * [`scenes`] – synthetic multi-agent BEV worlds with train/deploy domain presets
//! * [`eval`] – box decoding, NMS, IoU and average precision
//! * [`harness`] – base training, budgeted adaptation, checkpoints and result tables
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the `f64` instantiation used by the harness and the CLI.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod harness;
pub mod nn;
pub mod peft;
pub mod pipeline;
pub mod scalar;
pub mod scenes;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type TensorF = Tensor<f64>;
pub type TensorF32 = Tensor<f32>;
pub type Registry = nn::ParamRegistry<f64>;
pub type Grads = nn::GradMap<f64>;
