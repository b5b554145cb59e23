//! Reverse-mode differentiation over dense matrices.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use tape::{Gradients, NodeId, Tape};
