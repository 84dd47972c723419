//! Attention-transfer + KL feature distillation for complex-ratio-mask speech
//! enhancement U-Nets.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors with reverse-mode autodiff and gradient checking
//! * [`signal`]: differentiable STFT / iSTFT
//! * [`nn`]: complex convolution blocks, LSTM stack, complex mask application
//! * [`models`]: tapped encoder/decoder U-Nets, parameter counts, checkpoints
//! * [`distill`]: time/channel attention transfer, AT and AT-KL losses, SI-SNR
//!   output distillation, and the teacher / student training loops
//! * [`data`]: synthetic clean/noisy mixtures and PCM16 WAV I/O
//! * [`gradsuite`]: finite-difference checks of every differentiable op
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the precision for the two common uses.

pub mod data;
pub mod distill;
mod error;
pub mod gradsuite;
pub mod models;
pub mod nn;
pub mod rng;
mod scalar;
pub mod signal;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor};

/// Single precision, used for training runs.
pub type Tensor32 = Tensor<f32>;
/// Double precision, used by tests and gradient checks.
pub type Tensor64 = Tensor<f64>;
pub type Model32 = models::Model<f32>;
pub type Model64 = models::Model<f64>;
