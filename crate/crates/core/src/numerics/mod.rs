//! Differentiable computation substrate: tensors, a reverse-mode tape,
//! diagonal-Gaussian divergences and finite-difference gradient checks.

mod gaussian;
mod gradcheck;
mod tape;
mod tensor;

pub use gaussian::{
    clamp_log_var, gaussian_kld, reparam_sample, sequence_symmetrized_kld, symmetrized_kld,
    DiagGaussian, DiagGaussianSeq, LOG_VAR_MAX, LOG_VAR_MIN,
};
pub use gradcheck::{grad_check, relative_error, GradReport, Selection, REL_ERR_FLOOR};
pub use tape::{
    log_softmax_at, softmax_in_place, softmax_rows, ConvSpec, Gradients, ParamEntry, ParamId,
    ParamStore, Tape, Var,
};
pub use tensor::Tensor;

