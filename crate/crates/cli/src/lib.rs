//! Command implementations behind the `tome` binary.

pub mod bench;
pub mod error;
pub mod ppm;
pub mod reference;
pub mod sweep;
pub mod verify;
pub mod visualize;

pub use error::{CliError, Result};

use tome_core::schedule::Schedule;
use tome_core::vit::{ModelConfig, ToMeConfig};

/// Small ViT used when no `--config` is given: 32×32 input, 4×4 patches
/// (65 tokens), width 64, 4 heads.
pub fn toy_config(depth: usize) -> ModelConfig {
    ModelConfig {
        image_size: 32,
        patch_size: 4,
        channels_in: 3,
        width: 64,
        depth,
        heads: 4,
        mlp_ratio: 4,
        num_classes: 10,
        tome: ToMeConfig::with_schedule(Schedule::zeros(depth)),
    }
}
