//! A small reverse-mode differentiable tensor engine.
//!
//! Only the operations needed by a four-branch attention U-Net and its
//! segmentation losses are provided: 2-D convolution, max/min pooling,
//! bilinear resampling, batch normalisation, a handful of elementwise
//! functions and reductions. Everything runs on the CPU in row-major
//! `NCHW` layout, generic over `f32` (training) and `f64` (gradient checks).
//!
//! Operations are recorded on a [`Tape`]. A tape created with
//! [`Tape::no_grad`] records nothing, so intermediate values are released as
//! soon as the caller drops them.

mod error;
pub mod gradcheck;
pub mod ops;
pub mod optim;
mod real;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::gradient_check;
pub use ops::{PoolMode, PoolPadding};
pub use optim::{clip_grad_global_norm, AdamW, ClipReport};
pub use real::{DType, Real};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
