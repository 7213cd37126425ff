use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ipn_core::equilibrium::{Equilibrium, ScanOptions};
use ipn_core::harness::{self, ExperimentConfig, ExperimentReport, SimulateOptions};

/// Spiked information-plus-noise matrices: predictions and Monte Carlo checks.
#[derive(Parser)]
#[command(name = "ipn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Support, outlier limits and overlaps predicted by the theory.
    Predict {
        #[command(flatten)]
        config: ConfigArg,
        /// Output JSON path (stdout if omitted).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Support profile of the limiting spectral measure.
    Support {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Limiting spectral density on a grid, as `x,density` CSV.
    Density {
        #[command(flatten)]
        config: ConfigArg,
        /// Distance from the real axis used for Stieltjes inversion.
        #[arg(long, default_value_t = 1e-6)]
        eta: f64,
        /// Grid as `lo:hi:points`.
        #[arg(long, default_value = "0:5:2000")]
        grid: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run the Monte Carlo trials and write the report.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        run: RunArgs,
        /// Report path; `.csv` selects CSV. Defaults to the configured output.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Simulate, gate on the tolerances and always write the report.
    Verify {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        run: RunArgs,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment configuration (TOML).
    #[arg(short, long = "config")]
    config: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Worker threads (IPN_WORKERS takes precedence).
    #[arg(long)]
    workers: Option<usize>,
    /// Write every sampled matrix to this directory.
    #[arg(long, num_args = 0..=1, default_missing_value = "dumps")]
    dump: Option<PathBuf>,
}

impl RunArgs {
    fn options(&self) -> SimulateOptions {
        SimulateOptions { workers: self.workers, dump_dir: self.dump.clone() }
    }
}

const EXIT_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let numerical = err
                .chain()
                .find_map(|e| e.downcast_ref::<ipn_core::Error>())
                .is_some_and(ipn_core::Error::is_numerical);
            ExitCode::from(if numerical { EXIT_NUMERICAL } else { EXIT_USAGE })
        }
    }
}

fn load(arg: &ConfigArg) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::load(&arg.config).with_context(|| format!("loading {}", arg.config.display()))
}

fn emit(text: &str, output: Option<&Path>) -> anyhow::Result<()> {
    let text = if text.ends_with('\n') { text.to_string() } else { format!("{text}\n") };
    match output {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn equilibrium(cfg: &ExperimentConfig) -> anyhow::Result<Equilibrium> {
    Ok(Equilibrium::new(cfg.params()?, &ScanOptions::default())?)
}

fn parse_grid(spec: &str) -> anyhow::Result<(f64, f64, usize)> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        bail!("grid {spec:?} must look like lo:hi:points");
    }
    let lo = parts[0].parse().with_context(|| format!("grid lower bound {:?}", parts[0]))?;
    let hi = parts[1].parse().with_context(|| format!("grid upper bound {:?}", parts[1]))?;
    let k = parts[2].parse().with_context(|| format!("grid point count {:?}", parts[2]))?;
    Ok((lo, hi, k))
}

fn print_summary(report: &ExperimentReport) {
    for check in &report.checks {
        println!("{:<15} {}", check.check.name(), if check.pass { "PASS" } else { "FAIL" });
        for m in check.metrics.iter().filter(|m| !m.pass) {
            println!(
                "  {}: mean {} (min {}, max {}) violates {:?}",
                m.name, m.stats.mean, m.stats.min, m.stats.max, m.rule
            );
        }
        for note in &check.notes {
            println!("  note: {note}");
        }
    }
    println!("overall         {}", if report.pass { "PASS" } else { "FAIL" });
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Predict { config, output } => {
            let cfg = load(&config)?;
            let theory = harness::predict(&cfg)?;
            emit(&serde_json::to_string_pretty(&theory)?, output.as_deref())?;
        }
        Command::Support { config, output } => {
            let cfg = load(&config)?;
            let eq = equilibrium(&cfg)?;
            emit(&serde_json::to_string_pretty(eq.profile())?, output.as_deref())?;
        }
        Command::Density { config, eta, grid, output } => {
            let cfg = load(&config)?;
            let (lo, hi, k) = parse_grid(&grid)?;
            let eq = equilibrium(&cfg)?;
            let csv = harness::density_csv(&eq, lo, hi, k, eta)?;
            emit(&csv, output.as_deref())?;
        }
        Command::Simulate { config, trials, seed, run, output } => {
            let mut cfg = load(&config)?;
            if let Some(t) = trials {
                cfg.trials = t;
            }
            if let Some(s) = seed {
                cfg.ensemble.seed = s;
            }
            cfg.validate()?;
            let report = harness::simulate(&cfg, &run.options())?;
            let target = output
                .map(|p| {
                    let f = harness::infer_format(&p, &cfg);
                    (p, f)
                })
                .or_else(|| cfg.output.as_ref().map(|o| (o.path.clone(), o.format)));
            match target {
                Some((path, format)) => {
                    report.write(&path, format).with_context(|| format!("writing {}", path.display()))?
                }
                None => println!("{}", report.to_json()?),
            }
        }
        Command::Verify { config, run, output } => {
            let cfg = load(&config)?;
            let path = output
                .or_else(|| cfg.output.as_ref().map(|o| o.path.clone()))
                .unwrap_or_else(|| PathBuf::from("report.json"));
            let report = harness::verify(&cfg, &run.options(), Some(&path))?;
            print_summary(&report);
            println!("report written to {}", path.display());
            if !report.pass {
                return Ok(ExitCode::from(EXIT_FAIL));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
