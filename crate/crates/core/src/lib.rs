//! Discriminative ranking with an embedded residual-quantization tokenizer:
//! one model scores items for ranking and searches code prefixes for
//! retrieval.
//!
//! Everything numeric is generic over [`numerics::Scalar`] (`f32` or `f64`);
//! the aliases below fix the scalar for common use.

pub mod data;
pub mod error;
pub mod eval;
pub mod ids;
pub mod mixer;
pub mod numerics;
pub mod retrieval;
pub mod tokenizer;
pub mod trainer;
pub mod u2t;

pub use error::{DigError, Result};
pub use ids::{ItemId, UserId};
pub use retrieval::{beam_search, build_index, rank_candidates, BeamConfig, InvertedIndex};
pub use trainer::{TrainConfig, TrainData, Variant};

/// Model in double precision.
pub type Model = trainer::DigModel<f64>;
/// Model in single precision.
pub type ModelF32 = trainer::DigModel<f32>;
pub type Tensor = numerics::Tensor2<f64>;
pub type TensorF32 = numerics::Tensor2<f32>;
pub type Store = numerics::ParamStore<f64>;
pub type StoreF32 = numerics::ParamStore<f32>;
