use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tome_cli::bench::{run_bench, write_bench_csv, BenchOptions};
use tome_cli::ppm::Ppm;
use tome_cli::sweep::{run_sweep, write_sweep_csv};
use tome_cli::verify::{run_verify, Fault};
use tome_cli::visualize::visualize;
use tome_core::schedule::ScheduleSpec;
use tome_core::vit::{init_weights, ModelConfig, ModelWeights};

#[derive(Parser)]
#[command(name = "tome", version, about = "Token merging for vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// Model config JSON; defaults to a 12-layer toy model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight container; random weights from `--seed` when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    Conservation,
}

#[derive(Subcommand)]
enum Command {
    /// Write a config and freshly initialized weights.
    Init {
        #[command(flatten)]
        model: ModelArgs,
        /// Output directory for config.json and weights.tome.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Time forward passes for one or more merge schedules.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        /// Schedule descriptor: const:R, dec:R or list:a,b,...; repeatable.
        #[arg(long = "schedule", default_value = "const:0")]
        schedules: Vec<ScheduleSpec>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate random schedules with a fixed total merge count.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        total: usize,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Timed forwards per schedule; 0 reports flops only.
        #[arg(long, default_value_t = 0)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Color each patch by the token it ends up in.
    Visualize {
        #[command(flatten)]
        model: ModelArgs,
        /// Schedule override for this run.
        #[arg(long)]
        schedule: Option<ScheduleSpec>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_model(args: &ModelArgs) -> anyhow::Result<(ModelConfig, ModelWeights<f32>)> {
    let cfg = match &args.config {
        Some(path) => ModelConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => tome_cli::toy_config(12),
    };
    cfg.validate()?;
    let weights = match &args.weights {
        Some(path) => ModelWeights::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => init_weights(&cfg, args.seed),
    };
    weights.check(&cfg)?;
    Ok((cfg, weights))
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Init { model, out } => {
            let (cfg, weights) = load_model(&model)?;
            std::fs::create_dir_all(&out)?;
            cfg.save(out.join("config.json"))?;
            weights.save(out.join("weights.tome"))?;
        }
        Command::Verify { seed, cases, inject_fault } => {
            let fault = inject_fault.map(|FaultArg::Conservation| Fault::Conservation);
            let report = run_verify(seed, cases, fault);
            print!("{report}");
            if !report.ok() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Bench { model, schedules, trials, warmup, batch, out } => {
            let (cfg, weights) = load_model(&model)?;
            let opts = BenchOptions {
                trials,
                warmup,
                batch,
                seed: model.seed,
                threads: None,
            };
            let rows = run_bench(&cfg, &weights, &schedules, &opts)?;
            write_bench_csv(output(out.as_deref())?, &rows)?;
        }
        Command::Sweep { model, total, samples, trials, out } => {
            let (cfg, weights) = load_model(&model)?;
            let rows = run_sweep(&cfg, &weights, total, samples, model.seed, trials)?;
            write_sweep_csv(output(out.as_deref())?, &rows)?;
        }
        Command::Visualize { model, schedule, image, out } => {
            let (mut cfg, weights) = load_model(&model)?;
            if let Some(spec) = schedule {
                cfg.tome.schedule = spec.resolve(cfg.depth)?;
            }
            let input = Ppm::read(&image).with_context(|| format!("reading {}", image.display()))?;
            if input.width != cfg.image_size || input.height != cfg.image_size {
                bail!(
                    "image is {}x{} but the model expects {}x{}",
                    input.width,
                    input.height,
                    cfg.image_size,
                    cfg.image_size
                );
            }
            let vis = visualize(&cfg, &weights, &input)?;
            vis.image.write(&out)?;
            eprintln!("{} tokens cover {} patches", vis.final_sources.len(), cfg.num_patches());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
