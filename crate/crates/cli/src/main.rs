mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hsicomp::Error;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "hsicomp", version, about = "Hyperspectral segmentation co-design toolkit")]
struct Cli {
    /// Overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration; keys left out keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default `paths.workdir`, else `./work`).
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct DataArg {
    /// Dataset directory (default `paths.dataset`, else `<workdir>/dataset`).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic mosaic dataset into `<workdir>/dataset`.
    GenData {
        /// Number of images (default `data.samples`).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the configured U-Net; writes `model/`, `stats.toml`, `train_history.csv`.
    Train {
        #[command(flatten)]
        data: DataArg,
    },
    /// Run the preprocessing chain over a dataset; writes `cubes/NNNN.hscb`.
    Preprocess {
        #[command(flatten)]
        data: DataArg,
        /// Clip statistics; without them the chain stops after per-pixel normalization.
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Leave the symmetric normalization to a fused graph.
        #[arg(long)]
        fused: bool,
        /// Process only the first N images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Parameter and FLOPS table of a model (or of the configured U-Net).
    Analyze {
        model: Option<PathBuf>,
        /// Input size as HxWxB.
        #[arg(long, default_value = "192x384x25")]
        input: String,
    },
    /// Per-layer sensitivity curves on the validation split.
    Sensitivity {
        model: Option<PathBuf>,
        #[command(flatten)]
        data: DataArg,
        /// wiou, giou or class:N (default `prune.metric`).
        #[arg(long)]
        metric: Option<String>,
    },
    /// Iterative structured pruning with finetuning; writes `pruned/`.
    Prune {
        model: Option<PathBuf>,
        #[command(flatten)]
        data: DataArg,
        /// Target per iteration; a single value is repeated `--iterations` times.
        #[arg(long, value_delimiter = ',')]
        overall_pr: Vec<f64>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Prune freshly initialized networks, then train them; writes `init/`.
    PruneAtInit {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        overall_pr: f64,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// BN folding, equalization and INT8 calibration; writes `quantized/`.
    Quantize {
        model: Option<PathBuf>,
        #[command(flatten)]
        data: DataArg,
        /// Calibration images (default `quant.calib_samples`).
        #[arg(long)]
        calib: Option<usize>,
        /// Fuse the symmetric input normalization before quantizing.
        #[arg(long)]
        fused: bool,
    },
    /// Segmentation scores on a split; `--quant` evaluates the INT8 simulation.
    Eval {
        model: Option<PathBuf>,
        #[command(flatten)]
        data: DataArg,
        /// Quantization table (default `paths.calib`).
        #[arg(long)]
        quant: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
    },
    /// Staged pipeline throughput; writes `bench.toml`.
    Bench {
        #[command(flatten)]
        data: DataArg,
        /// Model directory (default `paths.model`, else `<workdir>/model`).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Quantization table for an extra INT8 variant.
        #[arg(long)]
        quant: Option<PathBuf>,
        /// Stage plans, e.g. `1,3` (default `bench.stages`).
        #[arg(long, value_delimiter = ',')]
        stages: Vec<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        repeat: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        /// Injected stage delays in ms, `A,B,C`.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        delays: Vec<f64>,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
    let usage = matches!(e, Error::InvalidArgument(_) | Error::Parse { .. });
    ExitCode::from(if usage { 2 } else { 1 })
}

fn threads() -> hsicomp::Result<()> {
    let Ok(v) = std::env::var("HSICOMP_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("HSICOMP_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> hsicomp::Result<()> {
    threads()?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    let workdir = cli.workdir.or_else(|| cfg.paths.workdir.clone()).unwrap_or_else(|| PathBuf::from("work"));
    let ctx = commands::Ctx::new(cfg, workdir);
    match cli.command {
        Command::GenData { count } => ctx.gen_data(count),
        Command::Train { data } => ctx.train(&data),
        Command::Preprocess {
            data,
            stats,
            fused,
            limit,
        } => ctx.preprocess(&data, stats.as_deref(), fused, limit),
        Command::Analyze { model, input } => ctx.analyze(model.as_deref(), &input),
        Command::Sensitivity { model, data, metric } => ctx.sensitivity(model.as_deref(), &data, metric.as_deref()),
        Command::Prune {
            model,
            data,
            overall_pr,
            iterations,
        } => ctx.prune(model.as_deref(), &data, &overall_pr, iterations),
        Command::PruneAtInit { data, overall_pr, seeds } => ctx.prune_at_init(&data, overall_pr, seeds),
        Command::Quantize {
            model,
            data,
            calib,
            fused,
        } => ctx.quantize(model.as_deref(), &data, calib, fused),
        Command::Eval {
            model,
            data,
            quant,
            split,
        } => ctx.eval(model.as_deref(), &data, quant.as_deref(), &split),
        Command::Bench {
            data,
            model,
            quant,
            stages,
            frames,
            repeat,
            warmup,
            delays,
        } => ctx.bench(
            &data,
            model.as_deref(),
            quant.as_deref(),
            commands::BenchOverrides {
                stages,
                frames,
                repeat,
                warmup,
                delays,
            },
        ),
        Command::ShowConfig => {
            print!("{}", ctx.cfg.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
