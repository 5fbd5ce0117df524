//! Dense tensors, reverse-mode differentiation over the neural primitives,
//! the Adam optimizer, and a finite-difference gradient checker.

mod adam;
mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use adam::{AdamConfig, AdamState, Moments};
pub use gradcheck::{
    grad_check, grad_check_suite, grad_check_with, ErrorTally, GradCheckOptions, GradCheckReport,
    PrimitiveKind, ShapeSpec, SuiteRow, ATOL, FD_STEP, RTOL,
};
pub use graph::{Gradients, Graph, NodeId};
pub use ops::{dropout_mask, primitive_forward, Aux, Axis, BnMode, CustomOp, Op, PoolKind};
pub use tensor::{Scalar, Tensor};
