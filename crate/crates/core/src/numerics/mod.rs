//! Dense tensors, reverse-mode differentiation and gradient verification.

mod check;
mod grid;
mod tape;

pub use check::{finite_difference_check, gradient_check_all, LossFn};
pub use grid::{log_add, log_sum_exp, softmax, Grid};
pub use tape::{pool_bins, ConvGeom, Param, ParamId, ParamSet, Tape, Var};
