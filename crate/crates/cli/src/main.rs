use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ota_fl::harness::{parse_overrides, run_bound, run_experiment, ExperimentConfig, MEAN_FILE};
use ota_fl::Execution;

/// Over-the-air federated learning simulator with AgeTop-k sparsification.
#[derive(Parser)]
#[command(name = "ota-fl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the training experiment and write per-trial and mean metrics.
    Run {
        /// key=value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Experiment preset: fig1, fig2, fig3a or fig3b.
        #[arg(long)]
        preset: Option<String>,
        /// Output directory (overrides `out` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Disable data parallelism.
        #[arg(long)]
        sequential: bool,
        /// Configuration overrides as `--key value` or `--key=value`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Evaluate the convergence bound and write it as CSV.
    Bound {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
}

fn load(config: Option<&PathBuf>, preset: Option<String>, overrides: &[String]) -> anyhow::Result<ExperimentConfig> {
    let mut pairs = Vec::new();
    if let Some(p) = preset {
        pairs.push(("preset".to_string(), p));
    }
    pairs.extend(parse_overrides(overrides)?);
    Ok(ExperimentConfig::load(config.map(PathBuf::as_path), &pairs)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            preset,
            out,
            sequential,
            overrides,
        } => {
            let cfg = load(config.as_ref(), preset, &overrides)?;
            let out = out
                .or_else(|| cfg.out.clone())
                .context("no output directory: pass --out or set `out`")?;
            let exec = if sequential {
                Execution::Sequential
            } else {
                Execution::default()
            };
            let report = run_experiment(&cfg, &out, exec)?;
            if let Some(last) = report.mean.last() {
                println!(
                    "{} trials x {} rounds: final test accuracy {:.4}, test loss {:.4} ({})",
                    report.trials.len(),
                    report.mean.len(),
                    last.test_accuracy,
                    last.test_loss,
                    out.join(MEAN_FILE).display()
                );
            }
        }
        Command::Bound {
            config,
            preset,
            out,
            overrides,
        } => {
            let cfg = load(config.as_ref(), preset, &overrides)?;
            let report = run_bound(&cfg, &out)?;
            let last = report.trajectory.values.last().copied().unwrap_or(f64::NAN);
            println!("bound after {} rounds: {last:.6e} ({})", cfg.rounds, out.display());
            if report.trajectory.diverging {
                eprintln!("warning: D(t) >= 1 for some round; the bound does not contract");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
