//! Minimal reverse-mode differentiation engine for transformer models.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod real;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, grad_check_params, param_gradients, relative_error, GradCheckReport};
pub use graph::{sigmoid, AttnMask, Gradients, Graph, Var};
pub use optim::{adam_step, cosine_lr, AdamConfig, AdamState};
pub use params::{Init, Param, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;
