//! Laboratory for cross-lingual masked language modeling objectives.
//!
//! The crate builds MMLM, TLM, CAMLM and two-stage BTMLM batches as explicit
//! attention-visibility matrices, trains a small transformer encoder on
//! synthetic cipher-language corpora, and evaluates cross-lingual alignment.
//! All numeric code is generic over [`Scalar`]; use the `*32` aliases for
//! training runs and the `*64` aliases for gradient checks.

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{NumericMode, Scalar};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Params32 = model::Params<f32>;
pub type Params64 = model::Params<f64>;
