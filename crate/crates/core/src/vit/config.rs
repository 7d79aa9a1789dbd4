use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{HeadAggregation, Metric, PartitionStyle};
use crate::merging::CombineMode;
use crate::schedule::Schedule;

/// Which per-token features the matcher compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum SimilarityFeature {
    #[default]
    K,
    Q,
    V,
    /// Block features after the attention residual.
    X,
    /// Block input, before attention.
    #[serde(rename = "X_pre")]
    XPre,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Merge,
    PruneRandom,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ToMeConfig {
    /// Empty means "no merging"; it is expanded to zeros of the model depth
    /// when a config is loaded.
    pub schedule: Schedule,
    pub feature: SimilarityFeature,
    pub metric: Metric,
    pub head_agg: HeadAggregation,
    pub combine: CombineMode,
    pub partition: PartitionStyle,
    pub prop_attn: bool,
    pub reduction: Reduction,
    /// Seeds the random partition and random pruning (offset per layer).
    pub seed: u64,
}

impl Default for ToMeConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            feature: SimilarityFeature::K,
            metric: Metric::Cosine,
            head_agg: HeadAggregation::Mean,
            combine: CombineMode::WeightedAvg,
            partition: PartitionStyle::Alternating,
            prop_attn: true,
            reduction: Reduction::Merge,
            seed: 0,
        }
    }
}

impl ToMeConfig {
    pub fn with_schedule(schedule: Schedule) -> Self {
        Self {
            schedule,
            ..Self::default()
        }
    }
}

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels_in: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub tome: ToMeConfig,
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels_in
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image size {} is not a positive multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return fail(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if self.channels_in == 0 || self.depth == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return fail("channels_in, depth, num_classes and mlp_ratio must be positive".into());
        }
        if self.tome.schedule.len() != self.depth {
            return fail(format!(
                "schedule has {} entries for {} layers",
                self.tome.schedule.len(),
                self.depth
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text)?;
        if cfg.tome.schedule.is_empty() {
            cfg.tome.schedule = Schedule::zeros(cfg.depth);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_uses_snake_case_names() {
        let text = r#"{
            "image_size": 32, "patch_size": 16, "channels_in": 3, "width": 8,
            "depth": 2, "heads": 2, "num_classes": 5,
            "tome": {"schedule": [1, 0], "feature": "X_pre", "metric": "euclidean",
                     "head_agg": "concat", "combine": "keep_one", "partition": "random",
                     "prop_attn": false, "reduction": "prune_random"}
        }"#;
        let cfg = ModelConfig::from_json(text).unwrap();
        assert_eq!(cfg.mlp_ratio, 4);
        assert_eq!(cfg.num_tokens(), 5);
        assert_eq!(cfg.tome.feature, SimilarityFeature::XPre);
        assert_eq!(cfg.tome.combine, CombineMode::KeepOne);
        assert_eq!(cfg.tome.reduction, Reduction::PruneRandom);
        let back = ModelConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_tome_section_means_no_merging() {
        let text = r#"{"image_size": 32, "patch_size": 16, "channels_in": 3, "width": 8,
                       "depth": 3, "heads": 2, "num_classes": 5}"#;
        let cfg = ModelConfig::from_json(text).unwrap();
        assert_eq!(cfg.tome.schedule, Schedule::zeros(3));
        assert!(cfg.tome.prop_attn);
        assert_eq!(cfg.tome.metric, Metric::Cosine);
    }

    #[test]
    fn invalid_geometry_is_a_config_error() {
        let text = r#"{"image_size": 30, "patch_size": 16, "channels_in": 3, "width": 8,
                       "depth": 1, "heads": 2, "num_classes": 5}"#;
        assert!(matches!(ModelConfig::from_json(text), Err(Error::Config(_))));
        let text = r#"{"image_size": 32, "patch_size": 16, "channels_in": 3, "width": 9,
                       "depth": 1, "heads": 2, "num_classes": 5}"#;
        assert!(matches!(ModelConfig::from_json(text), Err(Error::Config(_))));
        let text = r#"{"image_size": 32, "patch_size": 16, "channels_in": 3, "width": 8,
                       "depth": 2, "heads": 2, "num_classes": 5, "tome": {"schedule": [1]}}"#;
        assert!(matches!(ModelConfig::from_json(text), Err(Error::Config(_))));
    }
}
