//! Dense tensors and a small reverse-mode autodiff engine, generic over
//! `f32`/`f64` through the [`Scalar`] trait.

mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamStore};
pub use scalar::{DType, Scalar};
pub use tape::{AttnMask, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("no tensor named {0:?}")]
    MissingTensor(String),
    #[error("tensor file format: {0}")]
    Format(String),
    #[error("i/o on {0}: {1}")]
    Io(String, #[source] std::io::Error),
}

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
