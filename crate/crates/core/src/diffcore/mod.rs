//! Differentiable tensor core: dense tensors, a reverse-mode tape and a
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{gradcheck, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{upsample2x_eager, Gradients, Graph, RegressionKind, UpsampleMode, Var};
pub use kernels::{conv_out_extent, PadMode};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests;
