//! Random-schedule sweep at a fixed total merge budget, with the constant
//! and decreasing schedules as labeled reference rows.

use std::io::Write;

use tome_core::schedule::{
    constant_schedule, decreasing_schedule, flop_estimate, sample_random_schedule, Schedule,
    ScheduleSpec,
};
use tome_core::vit::{ModelConfig, ModelWeights};

use crate::bench::{run_schedule, BenchOptions};
use crate::error::{CliError, Result};

pub const SWEEP_HEADER: [&str; 8] = [
    "kind",
    "schedule",
    "total_merged",
    "effective_merged",
    "final_tokens",
    "gflops",
    "mean_ms",
    "p50_ms",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// `constant`, `decreasing` or `random`.
    pub kind: &'static str,
    pub schedule: Schedule,
    pub total_merged: usize,
    pub effective_merged: usize,
    pub final_tokens: usize,
    pub flops: u64,
    pub mean_ms: Option<f64>,
    pub p50_ms: Option<f64>,
}

/// The schedules a sweep evaluates: the two references, then `samples`
/// random compositions of `total` (sample `i` is seeded with `seed + i`).
pub fn sweep_schedules(
    depth: usize,
    total: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<(&'static str, Schedule)>> {
    if !total.is_multiple_of(depth) {
        return Err(CliError::Usage(format!(
            "total {total} is not a multiple of depth {depth}; reference schedules need r = total / depth"
        )));
    }
    let r = total / depth;
    let mut out = vec![
        ("constant", constant_schedule(r, depth)?),
        ("decreasing", decreasing_schedule(r, depth)?),
    ];
    for i in 0..samples {
        out.push(("random", sample_random_schedule(total, depth, seed.wrapping_add(i as u64))?));
    }
    Ok(out)
}

/// Evaluates every sweep schedule. With `trials == 0` only the analytic
/// columns are filled and no forward passes run.
pub fn run_sweep(
    cfg: &ModelConfig,
    weights: &ModelWeights<f32>,
    total: usize,
    samples: usize,
    seed: u64,
    trials: usize,
) -> Result<Vec<SweepRow>> {
    let opts = BenchOptions {
        trials,
        warmup: 0,
        seed,
        ..BenchOptions::default()
    };
    sweep_schedules(cfg.depth, total, samples, seed)?
        .into_iter()
        .map(|(kind, schedule)| {
            let effective: usize = schedule.effective(cfg.num_tokens()).iter().sum();
            let mut row = SweepRow {
                kind,
                total_merged: schedule.total(),
                effective_merged: effective,
                final_tokens: cfg.num_tokens() - effective,
                flops: flop_estimate(cfg, &schedule),
                schedule,
                mean_ms: None,
                p50_ms: None,
            };
            if trials > 0 {
                let b = run_schedule(cfg, weights, &row.schedule, &opts)?;
                row.mean_ms = Some(b.mean_ms);
                row.p50_ms = Some(b.p50_ms);
            }
            Ok(row)
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    let ms = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    for row in rows {
        w.write_record([
            row.kind.to_string(),
            ScheduleSpec::List(row.schedule.per_layer.clone()).to_string(),
            row.total_merged.to_string(),
            row.effective_merged.to_string(),
            row.final_tokens.to_string(),
            format!("{:.6}", row.flops as f64 / 1e9),
            ms(row.mean_ms),
            ms(row.p50_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}
