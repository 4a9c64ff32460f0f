//! Dense numerical substrate shared by every model stage.
//!
//! Everything is `f64` and row-major. Each trainable composition has a
//! hand-written backward pass; [`grad_check`] is the oracle used to validate
//! them.

mod attention;
mod grad;
mod matrix;
mod ops;
mod params;

pub use attention::{
    mha_backward, mha_forward, multi_head_attention, scaled_dot_attention, Attention, MhaCache,
    MhaParams,
};
pub use grad::{grad_check, GradCheckReport};
pub use matrix::Matrix;
pub use ops::{argmax, cross_entropy, linear, softmax, ProbVector, PROB_FLOOR};
pub use params::{accumulate, flatten, scale_all, unflatten, zeros_like, Parameters};

pub(crate) use matrix::{dot, norm};
pub(crate) use ops::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_backward, softmax_cross_entropy,
    softmax_unchecked,
};
