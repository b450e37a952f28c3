//! Deterministic reverse-mode differentiation in double precision.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod rng;
pub mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Activation, Gradients, Graph, Var};
pub use rng::{derive_seed, Rng};
pub use tensor::{randn_seeded, Tensor};
