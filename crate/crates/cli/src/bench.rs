//! Throughput measurement for a schedule on a fixed model.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use tome_core::schedule::{flop_estimate, Schedule, ScheduleSpec};
use tome_core::vit::{model_forward, Image, ModelConfig, ModelWeights};

use crate::error::{CliError, Result};

pub const BENCH_HEADER: [&str; 11] = [
    "schedule",
    "r",
    "total_merged",
    "final_tokens",
    "gflops",
    "mean_ms",
    "p50_ms",
    "p95_ms",
    "img_per_s",
    "config_hash",
    "logits_hash",
];

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub trials: usize,
    pub warmup: usize,
    pub batch: usize,
    pub seed: u64,
    /// Worker threads for the batch; `None` reads `TOME_THREADS`.
    pub threads: Option<usize>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            trials: 10,
            warmup: 1,
            batch: 1,
            seed: 0,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub config_hash: String,
    pub schedule: String,
    pub r: Option<usize>,
    pub total_merged: usize,
    pub final_tokens: usize,
    pub gflops: f64,
    /// Wall-clock per batch forward.
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub img_per_s: f64,
    pub logits_hash: String,
}

pub fn thread_cap() -> Option<usize> {
    std::env::var("TOME_THREADS").ok()?.parse().ok().filter(|&n| n > 0)
}

/// Short hex digest used to fingerprint configs and outputs.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Fingerprint of the model and merge knobs, excluding the schedule.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let mut cfg = cfg.clone();
    cfg.tome.schedule = Schedule::default();
    short_hash(cfg.to_json().as_bytes())
}

/// Deterministic random images in `[0, 1)`.
pub fn random_images(cfg: &ModelConfig, count: usize, seed: u64) -> Vec<Image<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.channels_in * cfg.image_size * cfg.image_size;
    (0..count)
        .map(|_| {
            let data = (0..n).map(|_| rng.gen::<f32>()).collect();
            Image::new(cfg.channels_in, cfg.image_size, cfg.image_size, data).expect("sizes agree")
        })
        .collect()
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn hash_logits(all: &[Vec<f32>]) -> String {
    let mut bytes = Vec::new();
    for logits in all {
        for v in logits {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    short_hash(&bytes)
}

/// Times `trials` batch forwards of `cfg` with `schedule` swapped in.
pub fn run_schedule(
    cfg: &ModelConfig,
    weights: &ModelWeights<f32>,
    schedule: &Schedule,
    opts: &BenchOptions,
) -> Result<BenchResult> {
    if opts.trials == 0 || opts.batch == 0 {
        return Err(CliError::Usage("trials and batch must be at least 1".into()));
    }
    let mut cfg = cfg.clone();
    cfg.tome.schedule = schedule.clone();
    cfg.validate()?;
    weights.check(&cfg)?;
    let images = random_images(&cfg, opts.batch, opts.seed);

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = opts.threads.or_else(thread_cap) {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;

    let forward = || -> Result<(Vec<Vec<f32>>, usize, usize)> {
        let outs: Vec<_> = pool.install(|| {
            images
                .par_iter()
                .map(|img| model_forward(img, &cfg, weights))
                .collect::<tome_core::Result<Vec<_>>>()
        })?;
        let (merged, finals) = outs
            .first()
            .map(|(_, t)| (t.total_merged(), t.final_tokens()))
            .unwrap_or_default();
        Ok((outs.into_iter().map(|(l, _)| l).collect(), merged, finals))
    };

    let (logits, total_merged, final_tokens) = forward()?;
    for _ in 1..opts.warmup {
        forward()?;
    }
    let mut times = Vec::with_capacity(opts.trials);
    for _ in 0..opts.trials {
        let start = Instant::now();
        forward()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    Ok(BenchResult {
        config_hash: config_hash(&cfg),
        schedule: ScheduleSpec::List(schedule.per_layer.clone()).to_string(),
        r: None,
        total_merged,
        final_tokens,
        gflops: flop_estimate(&cfg, schedule) as f64 / 1e9,
        mean_ms,
        p50_ms: percentile(&times, 50.0),
        p95_ms: percentile(&times, 95.0),
        img_per_s: opts.batch as f64 / (mean_ms / 1e3),
        logits_hash: hash_logits(&logits),
    })
}

/// One benchmark row per schedule descriptor.
pub fn run_bench(
    cfg: &ModelConfig,
    weights: &ModelWeights<f32>,
    specs: &[ScheduleSpec],
    opts: &BenchOptions,
) -> Result<Vec<BenchResult>> {
    specs
        .iter()
        .map(|spec| {
            let schedule = spec.resolve(cfg.depth)?;
            let mut row = run_schedule(cfg, weights, &schedule, opts)?;
            row.schedule = spec.to_string();
            row.r = spec.r();
            Ok(row)
        })
        .collect()
}

pub fn write_bench_csv<W: Write>(out: W, rows: &[BenchResult]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(BENCH_HEADER)?;
    for row in rows {
        w.write_record([
            row.schedule.clone(),
            row.r.map(|r| r.to_string()).unwrap_or_default(),
            row.total_merged.to_string(),
            row.final_tokens.to_string(),
            format!("{:.6}", row.gflops),
            format!("{:.4}", row.mean_ms),
            format!("{:.4}", row.p50_ms),
            format!("{:.4}", row.p95_ms),
            format!("{:.2}", row.img_per_s),
            row.config_hash.clone(),
            row.logits_hash.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
