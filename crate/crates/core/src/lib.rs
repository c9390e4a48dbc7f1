//! Capsule networks whose representation is constrained by an
//! information-bottleneck penalty.

pub mod autodiff;
pub mod capsule;
pub mod data;
pub mod model;
pub mod real;
pub mod rng;
pub mod routing;
pub mod tensor;
pub mod training;

pub use autodiff::{AutodiffError, Tape, Var};
pub use real::{Precision, Real};
pub use tensor::Tensor;
