//! Multi-sense sentence encoder.
//!
//! Tokens are encoded as non-negative mixtures over `k` context-independent
//! sense vectors, pooled into sentence embeddings via three interchangeable
//! pooling laws, trained with masked-language-modeling then contrastive
//! objectives, and exposed to sense-level interpretability operations
//! (ablation, probing, edit-locality metrics) and style evaluation metrics.
//!
//! The numeric substrate in [`numerics`] is generic over the scalar type;
//! the model stack runs on the `f64` aliases below.

pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod interpret;
pub mod numerics;
pub mod pooling;
pub mod training;

/// Model-stack tensor: 64-bit floats throughout.
pub type Tensor = numerics::Tensor<f64>;
pub type Tape = numerics::Tape<f64>;
pub type ParamStore = numerics::ParamStore<f64>;
pub type NodeId = numerics::NodeId;

pub use numerics::NumericsError;
