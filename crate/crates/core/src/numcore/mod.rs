//! Minimal deterministic tensor library with reverse-mode differentiation.

pub mod attention;
pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod norm;
pub mod ops;
pub mod optim;
mod scalar;
mod tensor;

pub use attention::{scaled_dot_attention, self_attention, AttentionWeights};
pub use conv::{add_channel_bias, conv2d};
pub use norm::{group_norm, group_norm_plain, NORM_EPS};
pub use ops::*;
pub use optim::{adam_step, AdamState};
pub use scalar::{gemm, DType, Scalar};
pub use tensor::{grad_enabled, no_grad, NoGradGuard, Tape, Tensor};
