use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tome_core::matching::PartitionStyle;
use tome_core::merging::CombineMode;
use tome_core::schedule::{constant_schedule, decreasing_schedule, Schedule};
use tome_core::vit::{
    init_weights, model_forward, model_forward_inspect, Image, ModelConfig, Reduction, SimilarityFeature,
    ToMeConfig,
};

fn config(depth: usize, schedule: Schedule) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 2,
        channels_in: 3,
        width: 16,
        depth,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 5,
        tome: ToMeConfig::with_schedule(schedule),
    }
}

fn random_image(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Image<f32> {
    let n = cfg.channels_in * cfg.image_size * cfg.image_size;
    Image::new(cfg.channels_in, cfg.image_size, cfg.image_size, (0..n).map(|_| rng.gen()).collect()).unwrap()
}

fn all_configs() -> Vec<ModelConfig> {
    let mut out = Vec::new();
    let modes = [CombineMode::WeightedAvg, CombineMode::Avg, CombineMode::Max, CombineMode::KeepOne];
    let features = [SimilarityFeature::K, SimilarityFeature::Q, SimilarityFeature::V, SimilarityFeature::X, SimilarityFeature::XPre];
    let partitions = [PartitionStyle::Alternating, PartitionStyle::Sequential, PartitionStyle::Random];
    for (i, &combine) in modes.iter().enumerate() {
        for (j, &feature) in features.iter().enumerate() {
            let schedule = if (i + j) % 2 == 0 { constant_schedule(9, 4) } else { decreasing_schedule(9, 4) }.unwrap();
            let mut cfg = config(4, schedule);
            cfg.tome.combine = combine;
            cfg.tome.feature = feature;
            cfg.tome.partition = partitions[(i + j) % 3];
            cfg.tome.seed = (i * 5 + j) as u64;
            out.push(cfg);
        }
    }
    let mut prune = config(4, constant_schedule(9, 4).unwrap());
    prune.tome.reduction = Reduction::PruneRandom;
    out.push(prune);
    out
}

#[test]
fn sources_partition_every_original_token_after_each_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for cfg in all_configs().into_iter().filter(|c| c.tome.reduction == Reduction::Merge) {
        let weights = init_weights(&cfg, rng.gen());
        let image = random_image(&cfg, &mut rng);
        let n = cfg.num_tokens();
        let mut checked = 0;
        let (_, trace) = model_forward_inspect(&image, &cfg, &weights, &mut |_, state| {
            assert_eq!(state.total_size(), n as u64);
            assert!(state.sources_partition(n));
            checked += 1;
        })
        .unwrap();
        assert_eq!(checked, cfg.depth);
        assert_eq!(trace.final_sizes.iter().map(|&s| s as usize).sum::<usize>(), n);
        assert_eq!(trace.final_tokens(), n - trace.total_merged());
    }
}

#[test]
fn class_token_stays_first_and_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for cfg in all_configs() {
        let weights = init_weights(&cfg, rng.gen());
        let (_, trace) = model_forward(&random_image(&cfg, &mut rng), &cfg, &weights).unwrap();
        assert_eq!(trace.final_sources[0], vec![0], "{:?}", cfg.tome);
        assert_eq!(trace.final_sizes[0], 1);
    }
}

#[test]
fn token_counts_fall_by_effective_r() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = config(6, Schedule::new(vec![30, 20, 10, 5, 5, 5]));
    let weights = init_weights(&cfg, 4);
    let (_, trace) = model_forward(&random_image(&cfg, &mut rng), &cfg, &weights).unwrap();
    let mut n = cfg.num_tokens();
    for b in &trace.blocks {
        assert_eq!(b.tokens_in, n);
        assert!(b.effective <= b.requested);
        assert_eq!(b.tokens_out, n - b.effective);
        n = b.tokens_out;
    }
    assert!(trace.blocks.iter().any(|b| b.effective < b.requested));
}

#[test]
fn swapping_two_identical_patches_leaves_logits_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = config(4, constant_schedule(10, 4).unwrap());
    let weights = init_weights(&cfg, 5);
    let p = cfg.patch_size;
    let g = cfg.grid();
    for _ in 0..10 {
        let mut image = random_image(&cfg, &mut rng);
        let a = rng.gen_range(0..g * g);
        let b = (a + rng.gen_range(1..g * g)) % (g * g);
        let offset = |patch: usize, c: usize, dy: usize, dx: usize| {
            (c * cfg.image_size + (patch / g) * p + dy) * cfg.image_size + (patch % g) * p + dx
        };
        for c in 0..3 {
            for dy in 0..p {
                for dx in 0..p {
                    image.data[offset(b, c, dy, dx)] = image.data[offset(a, c, dy, dx)];
                }
            }
        }
        let mut swapped = image.clone();
        for c in 0..3 {
            for dy in 0..p {
                for dx in 0..p {
                    swapped.data.swap(offset(a, c, dy, dx), offset(b, c, dy, dx));
                }
            }
        }
        let (l1, t1) = model_forward(&image, &cfg, &weights).unwrap();
        let (l2, t2) = model_forward(&swapped, &cfg, &weights).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(t1.final_sources, t2.final_sources);
    }
}

#[test]
fn logits_do_not_depend_on_thread_count() {
    let cfg = config(3, decreasing_schedule(12, 3).unwrap());
    let weights = init_weights(&cfg, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let images: Vec<_> = (0..6).map(|_| random_image(&cfg, &mut rng)).collect();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            use rayon::prelude::*;
            images.par_iter().map(|im| model_forward(im, &cfg, &weights).unwrap().0).collect::<Vec<_>>()
        })
    };
    let serial: Vec<_> = images.iter().map(|im| model_forward(im, &cfg, &weights).unwrap().0).collect();
    assert_eq!(run(1), serial);
    assert_eq!(run(4), serial);
}

#[test]
fn weights_round_trip_through_a_file() {
    let cfg = config(2, Schedule::zeros(2));
    let weights = init_weights::<f32>(&cfg, 8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.tome");
    weights.save(&path).unwrap();
    let back = tome_core::vit::ModelWeights::<f32>::load(&path).unwrap();
    assert_eq!(back.to_bytes(), weights.to_bytes());
    back.check(&cfg).unwrap();
    let json = dir.path().join("c.json");
    cfg.save(&json).unwrap();
    assert_eq!(ModelConfig::load(&json).unwrap(), cfg);
}
