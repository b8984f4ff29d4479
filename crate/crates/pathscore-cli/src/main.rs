//! Command-line harness for score estimation and parameter estimation in
//! partially observed diffusions.

mod config;
mod experiments;
mod output;
mod presets;
mod summarize;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use config::{ExperimentConfig, Kind};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "pathscore",
    about = "Particle smoothing and multilevel score estimation for hidden diffusions",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file (JSON). Exactly one of --config/--preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset (see `pathscore list-presets`).
    #[arg(long)]
    preset: Option<String>,
    /// Root seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread count (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a hidden path and its observations.
    Simulate(RunArgs),
    /// Online score estimation, state parameterization.
    ScoreDirect(RunArgs),
    /// Online score estimation, bridge parameterization.
    ScoreBridge(RunArgs),
    /// Online score estimation, multilevel estimator.
    ScoreMl(RunArgs),
    /// Recursive maximum-likelihood parameter estimation.
    Estimate(RunArgs),
    /// Cost-versus-MSE sweep against a reference score.
    Benchmark(RunArgs),
    /// Fit log-cost against log-MSE slopes over benchmark result files.
    Summarize {
        /// results.csv files produced by `benchmark`.
        files: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// List the available presets.
    ListPresets,
}

fn resolve(args: &RunArgs, want: Kind) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), None) => {
            let s = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_json(&s)?
        }
        (None, Some(name)) => presets::preset(name)?,
        _ => bail!("provide exactly one of --config or --preset"),
    };
    if cfg.kind != want {
        bail!(
            "configuration kind {:?} does not match this subcommand",
            cfg.kind
        );
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: RunArgs, want: Kind) -> Result<()> {
    let cfg = resolve(&args, want)?;
    if args.print_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    experiments::run_experiment(&cfg, &args.out, args.workers)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(a) => run(a, Kind::Simulate),
        Command::ScoreDirect(a) => run(a, Kind::ScoreDirect),
        Command::ScoreBridge(a) => run(a, Kind::ScoreBridge),
        Command::ScoreMl(a) => run(a, Kind::ScoreMl),
        Command::Estimate(a) => run(a, Kind::Estimate),
        Command::Benchmark(a) => run(a, Kind::Benchmark),
        Command::Summarize { files, out } => {
            if files.is_empty() {
                bail!("summarize requires at least one results.csv file");
            }
            let fits = summarize::summarize_files(&files)?;
            std::fs::create_dir_all(&out)?;
            summarize::write_summary(&fits, &out)?;
            println!("estimator        points  slope      se");
            for f in &fits {
                println!(
                    "{:<16} {:>6}  {:>8.3}  {:>6.3}",
                    f.estimator, f.points, f.slope, f.slope_se
                );
            }
            Ok(())
        }
        Command::ListPresets => {
            for name in presets::preset_names() {
                println!("{name}");
            }
            Ok(())
        }
    }
}
