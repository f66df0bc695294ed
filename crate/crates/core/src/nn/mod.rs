//! Minimal tensor and layer kernel with exact forward/backward passes.

pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_default, GradCheckReport, LayerSpec};
pub use tensor::{MatmulPar, Scalar, Tensor};
