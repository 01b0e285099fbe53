//! Task-conditioned hypernetworks that generate adapter, LoRA and layer-norm
//! weights for a frozen encoder-decoder, trained jointly on several sequence
//! labelling tasks cast as sentinel-framed seq2seq.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision.

pub mod codec;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod host;
pub mod hypernet;
pub mod peft;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use hyperpeft_tensor::{Scalar, Tensor};

pub type HyperNet32 = hypernet::HyperNet<f32>;
pub type HyperNet64 = hypernet::HyperNet<f64>;
pub type ToyHost32 = host::ToyHost<f32>;
pub type ToyHost64 = host::ToyHost<f64>;
pub type InstrumentedModel32 = peft::InstrumentedModel<f32>;
pub type InstrumentedModel64 = peft::InstrumentedModel<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
