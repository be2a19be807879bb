//! Compact reverse-mode automatic differentiation over dense `f64` matrices.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{gradient_check, GradCheckOptions, GradCheckReport};
pub use graph::{sigmoid, Graph, TapeNode, Var};
pub use params::{Gradients, Parameter, ParameterStore, PARAMS_MAGIC};
pub use tensor::Tensor;
