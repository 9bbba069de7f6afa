//! Dense 2-D tensors with a tape-based reverse-mode autodiff, generic over the
//! floating-point width.

mod adam;
mod graph;
pub mod linalg;
mod matrix;
mod params;
mod scalar;

pub use adam::Adam;
pub use graph::{log_sigmoid_scalar, sigmoid_scalar, ConvSpec, Graph, Var};
pub use matrix::Matrix;
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use scalar::Scalar;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("singular matrix (zero pivot at column {pivot}, condition estimate {condition:.3e})")]
    Singular { pivot: usize, condition: f64 },
}
