//! Reverse-mode automatic differentiation over a tape, plus finite-difference
//! verification of the gradients it produces.

mod gradcheck;
mod tape;

pub use gradcheck::{
    central_difference, grad_check, relative_error, GradCheckConfig, GradCheckReport, ParamCheck,
};
pub use tape::{Node, NodeId, OpKind, Tape};
