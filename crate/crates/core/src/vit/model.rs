//! The forward pass: patch embedding, pre-norm blocks with the merge step
//! between attention and MLP, and the class-token head.

use crate::attention::{output_project, proportional_attention, qkv_project};
use crate::error::{invalid, Result};
use crate::matching::{
    bipartite_soft_matching_with, prepare_similarity, random_prune, MergePlan, Partition,
    PrunePlan,
};
use crate::merging::{apply_merge, apply_prune, TokenState};
use crate::scalar::Scalar;
use crate::schedule::mergeable;
use crate::tensor::{gelu_inplace, layer_norm, linear, HeadTensor, Matrix};
use crate::vit::{ModelConfig, ModelWeights, Reduction, SimilarityFeature};

/// Only the class token is protected.
pub const PROTECTED: [usize; 1] = [0];

/// Channel-major pixel grid, `[channels × height × width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return invalid(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Weights of one block, borrowed from the model's tensor map.
pub struct BlockWeights<'a, T> {
    pub norm1_w: &'a [T],
    pub norm1_b: &'a [T],
    pub qkv_w: &'a [T],
    pub qkv_b: &'a [T],
    pub proj_w: &'a [T],
    pub proj_b: &'a [T],
    pub norm2_w: &'a [T],
    pub norm2_b: &'a [T],
    pub fc1_w: &'a [T],
    pub fc1_b: &'a [T],
    pub fc2_w: &'a [T],
    pub fc2_b: &'a [T],
}

impl<'a, T: Scalar> BlockWeights<'a, T> {
    pub fn resolve(weights: &'a ModelWeights<T>, index: usize) -> Result<Self> {
        let g = |s: &str| weights.data(&format!("blocks.{index}.{s}"));
        Ok(Self {
            norm1_w: g("norm1.weight")?,
            norm1_b: g("norm1.bias")?,
            qkv_w: g("attn.qkv.weight")?,
            qkv_b: g("attn.qkv.bias")?,
            proj_w: g("attn.proj.weight")?,
            proj_b: g("attn.proj.bias")?,
            norm2_w: g("norm2.weight")?,
            norm2_b: g("norm2.bias")?,
            fc1_w: g("mlp.fc1.weight")?,
            fc1_b: g("mlp.fc1.bias")?,
            fc2_w: g("mlp.fc2.weight")?,
            fc2_b: g("mlp.fc2.bias")?,
        })
    }
}

/// What a block's reduction step did.
#[derive(Debug, Clone, PartialEq)]
pub enum ReductionPlan {
    None,
    Merge(MergePlan),
    Prune(PrunePlan),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace {
    pub requested: usize,
    pub effective: usize,
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub plan: ReductionPlan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub blocks: Vec<BlockTrace>,
    pub final_sizes: Vec<u32>,
    pub final_sources: Vec<Vec<u32>>,
}

impl ForwardTrace {
    pub fn token_counts(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.blocks.iter().map(|b| b.tokens_in).collect();
        if let Some(last) = self.blocks.last() {
            v.push(last.tokens_out);
        }
        v
    }

    pub fn total_merged(&self) -> usize {
        self.blocks.iter().map(|b| b.effective).sum()
    }

    pub fn final_tokens(&self) -> usize {
        self.final_sizes.len()
    }
}

/// Splits the image into patches, projects them, prepends the class token
/// and adds position embeddings. Patches are numbered row-major; each patch
/// is flattened channel, then row, then column.
pub fn patch_embed<T: Scalar>(image: &Image<T>, cfg: &ModelConfig, weights: &ModelWeights<T>) -> Result<TokenState<T>> {
    if image.channels != cfg.channels_in || image.height != cfg.image_size || image.width != cfg.image_size {
        return invalid(format!(
            "image is {}x{}x{}, config expects {}x{}x{}",
            image.channels, image.height, image.width, cfg.channels_in, cfg.image_size, cfg.image_size
        ));
    }
    let (p, grid, c) = (cfg.patch_size, cfg.grid(), cfg.width);
    let mut patches = Matrix::zeros(cfg.num_patches(), cfg.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            let row = patches.row_mut(gy * grid + gx);
            let mut k = 0;
            for ch in 0..image.channels {
                for dy in 0..p {
                    for dx in 0..p {
                        row[k] = image.at(ch, gy * p + dy, gx * p + dx);
                        k += 1;
                    }
                }
            }
        }
    }
    let projected = linear(
        &patches,
        weights.data("patch_embed.weight")?,
        weights.data("patch_embed.bias")?,
        c,
    )?;
    let cls = weights.data("cls_token")?;
    let pos = weights.data("pos_embed")?;
    if cls.len() != c || pos.len() != cfg.num_tokens() * c {
        return invalid("class token or position embedding does not match the config");
    }
    let mut features = Matrix::zeros(cfg.num_tokens(), c);
    features.row_mut(0).copy_from_slice(cls);
    for i in 0..cfg.num_patches() {
        features.row_mut(i + 1).copy_from_slice(projected.row(i));
    }
    for (i, v) in features.as_mut_slice().iter_mut().enumerate() {
        *v += pos[i];
    }
    Ok(TokenState::new(features))
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed.wrapping_add((layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// One pre-norm block: `x + Attn(LN(x))`, then the reduction step on the
/// post-residual state, then `x + MLP(LN(x))` on the reduced tokens.
pub fn block_forward<T: Scalar>(
    state: &TokenState<T>,
    r: usize,
    weights: &BlockWeights<'_, T>,
    cfg: &ModelConfig,
    layer: usize,
) -> Result<(TokenState<T>, BlockTrace)> {
    state.validate()?;
    let tome = &cfg.tome;
    let n = state.len();
    let x = &state.features;

    let h = layer_norm(x, weights.norm1_w, weights.norm1_b)?;
    let inputs = qkv_project(&h, weights.qkv_w, weights.qkv_b, cfg.heads, &state.sizes)?;
    let attn = proportional_attention(&inputs, tome.prop_attn)?;
    let mut x1 = output_project(&attn.output, weights.proj_w, weights.proj_b)?;
    x1.add_assign(x)?;

    let attended = TokenState {
        features: x1,
        sizes: state.sizes.clone(),
        sources: state.sources.clone(),
    };
    let (reduced, plan) = if r == 0 || n < 2 {
        (attended, ReductionPlan::None)
    } else {
        let seed = layer_seed(tome.seed, layer);
        match tome.reduction {
            Reduction::Merge => {
                let feature = match tome.feature {
                    SimilarityFeature::K => attn.keys.clone(),
                    SimilarityFeature::Q => inputs.q.clone(),
                    SimilarityFeature::V => inputs.v.clone(),
                    SimilarityFeature::X => HeadTensor::from_matrix(&attended.features),
                    SimilarityFeature::XPre => HeadTensor::from_matrix(x),
                };
                let sim = prepare_similarity(&feature, tome.head_agg, tome.metric, &PROTECTED)?;
                let partition = Partition::new(n, tome.partition, &PROTECTED, seed)?;
                let plan = bipartite_soft_matching_with(&sim, r, &partition)?;
                (apply_merge(&attended, &plan, tome.combine)?, ReductionPlan::Merge(plan))
            }
            Reduction::PruneRandom => {
                let plan = random_prune(n, r.min(mergeable(n)), &PROTECTED, seed)?;
                (apply_prune(&attended, &plan)?, ReductionPlan::Prune(plan))
            }
        }
    };

    let h2 = layer_norm(&reduced.features, weights.norm2_w, weights.norm2_b)?;
    let mut hidden = linear(&h2, weights.fc1_w, weights.fc1_b, cfg.hidden())?;
    gelu_inplace(&mut hidden);
    let mut out = linear(&hidden, weights.fc2_w, weights.fc2_b, cfg.width)?;
    out.add_assign(&reduced.features)?;

    let tokens_out = out.rows();
    let trace = BlockTrace {
        requested: r,
        effective: n - tokens_out,
        tokens_in: n,
        tokens_out,
        plan,
    };
    Ok((
        TokenState {
            features: out,
            sizes: reduced.sizes,
            sources: reduced.sources,
        },
        trace,
    ))
}

/// Full forward pass, calling `observe(layer, state)` after every block.
pub fn model_forward_inspect<T: Scalar>(
    image: &Image<T>,
    cfg: &ModelConfig,
    weights: &ModelWeights<T>,
    observe: &mut dyn FnMut(usize, &TokenState<T>),
) -> Result<(Vec<T>, ForwardTrace)> {
    cfg.validate()?;
    let mut state = patch_embed(image, cfg, weights)?;
    let mut blocks = Vec::with_capacity(cfg.depth);
    for layer in 0..cfg.depth {
        let bw = BlockWeights::resolve(weights, layer)?;
        let (next, trace) = block_forward(&state, cfg.tome.schedule.per_layer[layer], &bw, cfg, layer)?;
        observe(layer, &next);
        blocks.push(trace);
        state = next;
    }
    let normed = layer_norm(&state.features, weights.data("norm.weight")?, weights.data("norm.bias")?)?;
    let cls = normed.select_rows(&[0]);
    let logits = linear(&cls, weights.data("head.weight")?, weights.data("head.bias")?, cfg.num_classes)?;
    Ok((
        logits.into_vec(),
        ForwardTrace {
            blocks,
            final_sizes: state.sizes,
            final_sources: state.sources,
        },
    ))
}

pub fn model_forward<T: Scalar>(
    image: &Image<T>,
    cfg: &ModelConfig,
    weights: &ModelWeights<T>,
) -> Result<(Vec<T>, ForwardTrace)> {
    model_forward_inspect(image, cfg, weights, &mut |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{constant_schedule, Schedule};
    use crate::vit::{init_weights, ToMeConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(image: usize, patch: usize, depth: usize, schedule: Schedule) -> ModelConfig {
        ModelConfig {
            image_size: image,
            patch_size: patch,
            channels_in: 3,
            width: 8,
            depth,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 4,
            tome: ToMeConfig::with_schedule(schedule),
        }
    }

    fn random_image(cfg: &ModelConfig, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.channels_in * cfg.image_size * cfg.image_size;
        Image::new(cfg.channels_in, cfg.image_size, cfg.image_size, (0..n).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn token_counts_from_geometry() {
        let c = cfg(224, 16, 1, Schedule::zeros(1));
        assert_eq!(c.num_tokens(), 197);
        assert_eq!(c.patch_dim(), 768);
        let c = cfg(32, 16, 1, Schedule::zeros(1));
        let w = init_weights(&c, 0);
        let s = patch_embed(&random_image(&c, 0), &c, &w).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.sizes, vec![1; 5]);
        assert_eq!(s.sources, (0..5).map(|i| vec![i]).collect::<Vec<_>>());
    }

    #[test]
    fn zero_weights_give_zero_tokens() {
        let c = cfg(32, 16, 1, Schedule::zeros(1));
        let mut w: ModelWeights<f64> = init_weights(&c, 0);
        for name in ["patch_embed.weight", "patch_embed.bias", "pos_embed", "cls_token"] {
            w.get_mut(name).unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        }
        let s = patch_embed(&random_image(&c, 1), &c, &w).unwrap();
        assert!(s.features.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(s.sizes, vec![1; 5]);
    }

    #[test]
    fn wrong_image_size_rejected() {
        let c = cfg(32, 16, 1, Schedule::zeros(1));
        let w = init_weights(&c, 0);
        let img = Image::new(3, 16, 16, vec![0.0f64; 3 * 256]).unwrap();
        assert!(patch_embed(&img, &c, &w).is_err());
    }

    #[test]
    fn block_with_r1_drops_one_token() {
        let c = cfg(32, 16, 1, Schedule::new(vec![1]));
        let w = init_weights(&c, 4);
        let s = patch_embed(&random_image(&c, 2), &c, &w).unwrap();
        let bw = BlockWeights::resolve(&w, 0).unwrap();
        let (out, trace) = block_forward(&s, 1, &bw, &c, 0).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out.total_size(), 5);
        assert_eq!(trace.effective, 1);
        let (same, trace) = block_forward(&s, 0, &bw, &c, 0).unwrap();
        assert_eq!(same.sizes, s.sizes);
        assert_eq!(trace.plan, ReductionPlan::None);
    }

    /// Cosine bipartite plan for r = 1 evaluated directly from rows.
    fn first_edge(rows: &dyn Fn(usize) -> Vec<f64>, n: usize) -> (usize, usize) {
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for a in (2..n).step_by(2) {
            for b in (1..n).step_by(2) {
                let s = cos(&rows(a), &rows(b));
                if s > best.0 {
                    best = (s, a, b);
                }
            }
        }
        (best.1, best.2)
    }

    #[test]
    fn feature_choice_changes_the_plan() {
        let c = cfg(32, 8, 1, Schedule::new(vec![1]));
        let mut separated = 0;
        for seed in 0..20 {
            let w = init_weights(&c, seed);
            let s = patch_embed(&random_image(&c, seed), &c, &w).unwrap();
            let n = s.len();
            let bw = BlockWeights::resolve(&w, 0).unwrap();
            let h = layer_norm(&s.features, bw.norm1_w, bw.norm1_b).unwrap();
            let inputs = qkv_project(&h, bw.qkv_w, bw.qkv_b, c.heads, &s.sizes).unwrap();
            let mean_key = |t: usize| {
                (0..c.head_dim())
                    .map(|j| (0..c.heads).map(|hd| inputs.k.row(hd, t)[j]).sum::<f64>() / c.heads as f64)
                    .collect()
            };
            let key_edge = first_edge(&mean_key, n);
            let xpre_edge = first_edge(&|t| s.features.row(t).to_vec(), n);

            let run = |feature| {
                let mut c2 = c.clone();
                c2.tome.feature = feature;
                let (_, trace) = block_forward(&s, 1, &bw, &c2, 0).unwrap();
                match trace.plan {
                    ReductionPlan::Merge(p) => (p.edges()[0].src, p.edges()[0].dst),
                    _ => unreachable!(),
                }
            };
            assert_eq!(run(SimilarityFeature::K), key_edge);
            assert_eq!(run(SimilarityFeature::XPre), xpre_edge);
            if key_edge != xpre_edge {
                separated += 1;
            }
        }
        assert!(separated > 0, "no instance separated K from X_pre");
    }

    #[test]
    fn constant_eight_over_twenty_four_layers() {
        let mut c = cfg(224, 16, 24, constant_schedule(8, 24).unwrap());
        c.width = 4;
        c.heads = 1;
        c.mlp_ratio = 1;
        let w: ModelWeights<f32> = init_weights(&c, 0);
        let img = Image::new(3, 224, 224, vec![0.5f32; 3 * 224 * 224]).unwrap();
        let (_, trace) = model_forward(&img, &c, &w).unwrap();
        let counts = trace.token_counts();
        assert_eq!(counts[0], 197);
        assert_eq!(counts[23], 13);
        // the last block can only merge 6 of the 7 tokens in A (class token kept)
        assert_eq!(trace.blocks[23].effective, 6);
        assert_eq!(trace.final_tokens(), 7);
    }

    #[test]
    fn class_token_survives_and_sizes_conserved() {
        for (i, partition) in [
            crate::matching::PartitionStyle::Alternating,
            crate::matching::PartitionStyle::Sequential,
            crate::matching::PartitionStyle::Random,
        ]
        .into_iter()
        .enumerate()
        {
            let mut c = cfg(32, 8, 3, Schedule::new(vec![4, 4, 4]));
            c.tome.partition = partition;
            let w = init_weights(&c, i as u64);
            let (_, trace) = model_forward(&random_image(&c, 5), &c, &w).unwrap();
            assert_eq!(trace.final_sources[0][0], 0);
            assert_eq!(trace.final_sizes.iter().sum::<u32>(), 17);
            for b in &trace.blocks {
                assert_eq!(b.tokens_in - b.effective, b.tokens_out);
            }
        }
    }

    #[test]
    fn prune_reduction_loses_size() {
        let mut c = cfg(32, 8, 2, Schedule::new(vec![3, 3]));
        c.tome.reduction = Reduction::PruneRandom;
        let w = init_weights(&c, 2);
        let (_, trace) = model_forward(&random_image(&c, 1), &c, &w).unwrap();
        assert_eq!(trace.final_tokens(), 11);
        assert_eq!(trace.final_sizes.iter().sum::<u32>(), 11);
        assert_eq!(trace.final_sources[0], vec![0]);
    }
}
