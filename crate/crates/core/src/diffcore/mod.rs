//! Minimal reverse-mode differentiation for this project's models: dense
//! matrices, sequential MLPs with optional batch-norm, Adam, gradient
//! reversal, softmax/NLL primitives, checkpoint files, and a finite-difference
//! harness. There is deliberately no general computation graph; the only
//! structures that exist are the ones the training procedures need, which
//! keeps every gradient small enough to verify by hand or by differences.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod ops;

pub use adam::{AdamConfig, AdamState};
pub use matrix::Matrix;
pub use mlp::{Activation, BnParams, LayerParams, Mlp, MlpSpec, ParamGrads, ParamSet, Tape};
pub use ops::{grad_reverse, ln_clamped, nll_sum_with_grad, softmax_rows, LOG_FLOOR};
