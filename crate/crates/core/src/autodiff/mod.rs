//! Reverse-mode differentiation over a small, closed set of grid primitives.
//!
//! Objectives are written against the core primitives (`add`, `sub`, `mul`,
//! `scalar_mul`, `square`, `sqrt_eps`, `div_eps`, `spatial_gradient`,
//! `box_mean`, `warp_linear`, `reduce_mean`, `reduce_sum`, `stack`, `slice`).
//! The displacement predictor additionally uses `conv3d`, `leaky_relu`,
//! `avg_pool2` and `upsample_linear`.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckReport, Probe, TOL_DOUBLE, TOL_SINGLE};
pub use graph::{Gradients, Graph, GraphError, Region, Var};
pub use tensor::{numel, pairwise_sum, Shape4, Tensor, SCALAR};
