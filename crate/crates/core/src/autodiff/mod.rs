//! Dense tensors with a tape-based reverse mode, sized for the small
//! trainable subgraph of a task (one modulator plus the new classifier
//! columns).

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck};
pub use tape::{layer_norm, softmax_rows, Reduction, Tape, Tensor, Var};

/// Epsilon used by every layer normalization in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;
