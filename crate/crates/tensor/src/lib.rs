//! Reverse-mode automatic differentiation, transformer layers, Adam/AdamW
//! and a binary checkpoint format, sized for small models trained on CPU.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use kernels::AttnSpec;
pub use optim::{GradAccumulator, Optimizer, OptimizerKind, StepStats};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
