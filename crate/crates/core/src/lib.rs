//! Token merging (ToMe) for vision transformers.
//!
//! Similar tokens are combined inside every transformer block, between the
//! attention and MLP branches, so the sequence shrinks by a scheduled number
//! of tokens per layer without retraining. The crate holds the matcher
//! ([`matching`]), the merge itself ([`merging`]), size-aware attention
//! ([`attention`]), merge schedules with a cost model ([`schedule`]) and a
//! minimal ViT that ties them together ([`vit`]).
//!
//! Numeric code is generic over [`Scalar`]; the `*F32` / `*F64` aliases
//! below name the common instantiations.

pub mod attention;
pub mod error;
pub mod matching;
pub mod merging;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type MatrixF32 = tensor::Matrix<f32>;
pub type MatrixF64 = tensor::Matrix<f64>;
pub type TokenStateF32 = merging::TokenState<f32>;
pub type TokenStateF64 = merging::TokenState<f64>;
pub type SimilarityInputF32 = matching::SimilarityInput<f32>;
pub type SimilarityInputF64 = matching::SimilarityInput<f64>;
pub type AttentionInputsF32 = attention::AttentionInputs<f32>;
pub type AttentionInputsF64 = attention::AttentionInputs<f64>;
pub type ModelWeightsF32 = vit::ModelWeights<f32>;
pub type ModelWeightsF64 = vit::ModelWeights<f64>;
pub type ImageF32 = vit::Image<f32>;
pub type ImageF64 = vit::Image<f64>;
