//! Self-attention sequential recommendation with attention-weight refinement.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix `f64`.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod export;
pub mod refine;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use config::{Backbone, Mechanism, ModelConfig, RankingMode, RefineScale, TrainConfig};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type Model = backbone::Model<f64>;
pub type AttentionRecord = backbone::AttentionRecord<f64>;
pub type Trainer<'a, 'h> = train::Trainer<'a, 'h, f64>;
