//! Transducer speech-recognition toolkit: a small reverse-mode tape, a
//! conformer-style transducer with residual adapters, the lattice loss,
//! recognition metrics, training loops and a synthetic-domain generator.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which the harness uses throughout.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::adapter::{AdapterSpec, Position};
pub use model::{ForwardCtx, Mode, ModelConfig, TransducerModel};
pub use params::{Param, ParamStore};
pub use rng::SeedTree;
pub use scalar::Scalar;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type ParamStore64 = ParamStore<f64>;
pub type Model64 = TransducerModel<f64>;
pub type Example64 = train::Example<f64>;

pub type Tensor32 = Tensor<f32>;
pub type Model32 = TransducerModel<f32>;
