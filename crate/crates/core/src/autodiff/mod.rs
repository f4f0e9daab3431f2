//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod linalg;
mod params;
mod tape;

pub use gradcheck::{grad_check, grad_check_where, relative_error};
pub use params::{ParamId, ParamStore, PARAMS_MAGIC};
pub use tape::{Gradients, NodeId, Tape};
