use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use chrono_lens::config::ScenarioConfig;
use chrono_lens::pipeline::{self, PipelineError};
use chrono_lens::scenario::Scenario;
use clap::{Args, Parser, Subcommand};

/// Spacetime tomography from light observations, and wave-interaction experiments.
#[derive(Parser)]
#[command(name = "chrono-lens", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config and print its normalized form.
    Validate(Common),
    /// Run the forward model and write the observation dataset.
    Forward(Common),
    /// Reconstruct conformal classes from a dataset.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Dataset file; defaults to the one in the output directory.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run the configured wave experiments.
    Wave(Common),
    /// Emit CSV plot data from the artifacts in the output directory.
    Plots(Common),
    /// Forward, reconstruct, wave and plots in sequence.
    All(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed in the config (and therefore its hash).
    #[arg(long)]
    seed: Option<u64>,
    /// Skip the dataset/config hash check.
    #[arg(long)]
    force: bool,
    /// Worker threads; falls back to CHRONO_LENS_JOBS.
    #[arg(long)]
    jobs: Option<usize>,
}

const GATE_FAILURE: u8 = 2;
const CONFIG_ERROR: u8 = 3;
const RUNTIME_ERROR: u8 = 4;

fn load(c: &Common) -> Result<ScenarioConfig, PipelineError> {
    let path = c.config.as_deref().unwrap_or(Path::new("config.json"));
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn set_jobs(c: &Common) -> anyhow::Result<()> {
    let jobs = match c.jobs {
        Some(j) => Some(j),
        None => match std::env::var("CHRONO_LENS_JOBS") {
            Ok(v) => Some(v.trim().parse().context("CHRONO_LENS_JOBS must be a positive integer")?),
            Err(_) => None,
        },
    };
    if let Some(j) = jobs {
        anyhow::ensure!(j > 0, "--jobs must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global().context("configuring the worker pool")?;
    }
    Ok(())
}

fn gate_line(name: &str, passed: bool) -> bool {
    eprintln!("{name}: {}", if passed { "gates pass" } else { "gate failure" });
    passed
}

fn run(cli: Cli) -> Result<bool, PipelineError> {
    match cli.command {
        Command::Validate(c) => {
            let cfg = load(&c)?;
            Scenario::build(&cfg)?;
            println!("{}", cfg.to_json());
            Ok(true)
        }
        Command::Forward(c) => {
            let cfg = load(&c)?;
            let ds = pipeline::forward(&cfg, &c.out)?;
            eprintln!("{} records, {} forward failures", ds.records.len(), ds.failures.len());
            Ok(true)
        }
        Command::Reconstruct { common: c, dataset } => {
            let cfg = load(&c)?;
            let rep = pipeline::reconstruct(&cfg, &c.out, dataset.as_deref(), c.force)?;
            Ok(gate_line("reconstruct", rep.passed()))
        }
        Command::Wave(c) => {
            let cfg = load(&c)?;
            match pipeline::wave(&cfg, &c.out)? {
                Some(rep) => Ok(gate_line("wave", rep.passed())),
                None => Err(PipelineError::Config(chrono_lens::config::ConfigError::Invalid {
                    pointer: "/wave".into(),
                    message: "no wave section".into(),
                })),
            }
        }
        Command::Plots(c) => {
            let files = pipeline::plots(&c.out)?;
            eprintln!("{} plot files", files.len());
            Ok(true)
        }
        Command::All(c) => {
            let cfg = load(&c)?;
            pipeline::forward(&cfg, &c.out)?;
            let rep = pipeline::reconstruct(&cfg, &c.out, None, c.force)?;
            let mut ok = gate_line("reconstruct", rep.passed());
            if let Some(w) = pipeline::wave(&cfg, &c.out)? {
                ok &= gate_line("wave", w.passed());
            }
            pipeline::plots(&c.out)?;
            Ok(ok)
        }
    }
}

fn common(cli: &Cli) -> &Common {
    match &cli.command {
        Command::Validate(c) | Command::Forward(c) | Command::Wave(c) | Command::Plots(c) | Command::All(c) => c,
        Command::Reconstruct { common, .. } => common,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = set_jobs(common(&cli)) {
        eprintln!("error: {e:#}");
        return ExitCode::from(CONFIG_ERROR);
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(GATE_FAILURE),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.exit_code() == 3 { CONFIG_ERROR } else { RUNTIME_ERROR })
        }
    }
}
