//! A small vision transformer with token merging built into every block.

mod config;
mod model;
mod weights;

pub use config::{ModelConfig, Reduction, SimilarityFeature, ToMeConfig};
pub use model::{
    block_forward, model_forward, model_forward_inspect, patch_embed, BlockTrace, BlockWeights,
    ForwardTrace, Image, ReductionPlan, PROTECTED,
};
pub use weights::{expected_shapes, init_weights, ModelWeights, Tensor, MAGIC, VERSION};
