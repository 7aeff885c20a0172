use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use mfas::gp::Noise;
use mfas::harness::{self, ErrorNormalization, Manifest, Prediction};
use mfas::{Algorithm, DimPolicy, RangeConfig, Registry, StudyConfig};

#[derive(Parser)]
#[command(name = "mfas", version, about = "Multi-fidelity active-subspace GP error studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an error study and write CSV results plus a manifest.
    Run(RunArgs),
    /// Print mean and spread of the errors in a results directory.
    Summarize { dir: PathBuf },
    /// Rerun the study recorded in a manifest.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Bench {
    Piston,
    Ebola,
}

#[derive(Clone, Copy, ValueEnum)]
enum Alg {
    Alg1,
    Alg2,
}

#[derive(Clone, Copy, ValueEnum)]
enum Norm {
    Mean,
    Sum,
}

/// `auto` or a positive integer.
#[derive(Clone, Copy)]
struct AsDim(DimPolicy);

impl FromStr for AsDim {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(AsDim(DimPolicy::SpectralGap));
        }
        match s.parse::<usize>() {
            Ok(r) if r >= 1 => Ok(AsDim(DimPolicy::Fixed(r))),
            _ => Err(format!("expected a positive integer or `auto`, got `{s}`")),
        }
    }
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    benchmark: Bench,
    #[arg(long, value_enum, default_value = "alg1")]
    algorithm: Alg,
    #[arg(long, default_value_t = 200)]
    n_low: usize,
    #[arg(long, value_delimiter = ',', default_value = "10,25,50,100,150")]
    n_high: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    n_test: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Feed the level-1 posterior mean into level 2 instead of sampling.
    #[arg(long)]
    mean_propagation: bool,
    #[arg(long, default_value_t = 100)]
    n_mc: usize,
    #[arg(long, default_value = "1")]
    as_dim: AsDim,
    /// Independent active-subspace design size for alg2 (default: n_high / 2).
    #[arg(long)]
    n_as: Option<usize>,
    /// TOML file overriding parameter ranges.
    #[arg(long)]
    ranges: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long, value_enum, default_value = "mean")]
    error_normalization: Norm,
    /// Fit Gaussian observation noise in the response surface instead of interpolating.
    #[arg(long)]
    rs_noise: bool,
}

fn study_config(args: &RunArgs) -> Result<StudyConfig> {
    let benchmark = match args.benchmark {
        Bench::Piston => "piston",
        Bench::Ebola => "ebola",
    };
    let ranges = match &args.ranges {
        Some(path) => {
            let mut registry = Registry::with_defaults();
            registry.apply_ranges(&RangeConfig::from_path(path)?)?;
            Some(registry.get(benchmark)?.ranges)
        }
        None => None,
    };
    Ok(StudyConfig {
        benchmark: benchmark.into(),
        algorithm: match args.algorithm {
            Alg::Alg1 => Algorithm::Shared,
            Alg::Alg2 => Algorithm::Independent,
        },
        n_low: args.n_low,
        n_high_grid: args.n_high.clone(),
        n_test: args.n_test,
        n_repetitions: args.reps,
        seed: args.seed,
        n_as: args.n_as,
        as_dim: args.as_dim.0,
        prediction: if args.mean_propagation { Prediction::MeanPropagation } else { Prediction::MonteCarlo },
        n_mc: args.n_mc,
        error_normalization: match args.error_normalization {
            Norm::Mean => ErrorNormalization::Mean,
            Norm::Sum => ErrorNormalization::Sum,
        },
        ranges,
        restarts: args.restarts,
        response_surface_noise: if args.rs_noise { Noise::Learned } else { Noise::Noiseless },
        ..StudyConfig::default()
    })
}

fn run(cfg: &StudyConfig, out: &Path) -> Result<()> {
    let start = Instant::now();
    let result = harness::run_study(cfg)?;
    let files = harness::emit_results(&result, out).with_context(|| format!("writing results to {}", out.display()))?;
    info!("finished in {:.1} s", start.elapsed().as_secs_f64());
    for f in files {
        println!("{}", f.display());
    }
    let failed = result.errors.iter().filter(|e| e.l1_error.is_none()).count();
    if failed > 0 {
        eprintln!("warning: {failed} model fits failed; see errors.csv");
    }
    Ok(())
}

fn summarize(dir: &Path) -> Result<()> {
    let rows = harness::summarize(dir)?;
    if rows.is_empty() {
        bail!("{} has no error rows", dir.join(harness::ERRORS_FILE).display());
    }
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6e}"));
    println!(
        "{:<10} {:<6} {:>7} {:<5} {:>14} {:>14} {:>4} {:>6}",
        "benchmark", "alg", "n_high", "model", "mean_l1", "std_l1", "ok", "failed"
    );
    for r in &rows {
        println!(
            "{:<10} {:<6} {:>7} {:<5} {:>14} {:>14} {:>4} {:>6}",
            r.benchmark,
            r.algorithm,
            r.n_high,
            r.model,
            fmt(r.mean),
            fmt(r.std_dev),
            r.succeeded,
            r.failed
        );
    }
    println!();
    println!("{:>7} {:>18}", "n_high", "MF vs HF change");
    let mut grid: Vec<usize> = rows.iter().map(|r| r.n_high).collect();
    grid.dedup();
    for n in grid {
        let mean = |m: &str| rows.iter().find(|r| r.n_high == n && r.model == m).and_then(|r| r.mean);
        if let (Some(mf), Some(hf)) = (mean("MF"), mean("HF")) {
            println!("{:>7} {:>17.1}%", n, 100.0 * (mf - hf) / hf);
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run(args) => {
            let cfg = study_config(&args)?;
            run(&cfg, &args.out)
        }
        Command::Summarize { dir } => summarize(&dir),
        Command::Replay { manifest, out } => {
            let manifest = Manifest::read(&manifest)?;
            let result = harness::replay(&manifest)?;
            harness::emit_results(&result, &out)?;
            println!("{}", out.join(harness::ERRORS_FILE).display());
            Ok(())
        }
    }
}
