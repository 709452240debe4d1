//! Result files: per-trial metrics, trial means, run metadata, and the
//! convergence-bound table.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ExperimentConfig;
use super::simulation::{run_trials, trial_seed, Dataset, ExperimentReport, RoundMetrics};
use crate::bound::{
    bound_trajectory, channel_error_bound, comp_error_bound, estimate_constants, gamma, q_terms, BoundParams,
    BoundTrajectory, ConstantTrace, Schedule, SurrogateConstants,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::PARAM_DIM;

pub const MEAN_FILE: &str = "mean.csv";
pub const META_FILE: &str = "run.meta";
pub const BOUND_FILE: &str = "bound.csv";

pub fn trial_file(trial: usize) -> String {
    format!("trial_{trial}.csv")
}

/// Fails early if any dataset file cannot be opened.
pub fn check_inputs(config: &ExperimentConfig) -> Result<()> {
    for p in config.require_data()?.all() {
        File::open(p).map_err(|e| Error::io(p, e))?;
    }
    if let Some(p) = &config.bound.trace {
        File::open(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

/// Creates `dir` and checks that it accepts files.
pub fn prepare_output_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    File::create(&probe).map_err(|e| Error::io(&probe, e))?;
    std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_metrics(path: &Path, rows: &[RoundMetrics]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<RoundMetrics>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

fn write_pairs(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in pairs {
        text.push_str(&format!("{k} = {v}\n"));
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn meta_pairs(config: &ExperimentConfig, report: &ExperimentReport) -> Vec<(String, String)> {
    let mut pairs: Vec<(String, String)> = config
        .resolved_pairs()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    pairs.push(("d".into(), PARAM_DIM.to_string()));
    pairs.push(("r_abs".into(), report.r_abs.to_string()));
    pairs.push(("k_abs".into(), report.k_abs.to_string()));
    pairs.push(("subcarriers".into(), (report.k_abs / 2).to_string()));
    for t in 0..config.trials {
        pairs.push((format!("trial_seed.{t}"), trial_seed(config, t as u64).to_string()));
    }
    pairs
}

/// Writes `trial_<i>.csv`, `mean.csv`, `run.meta` and, if requested, `bound.csv`.
pub fn write_report(dir: &Path, config: &ExperimentConfig, report: &ExperimentReport) -> Result<()> {
    for (i, rows) in report.trials.iter().enumerate() {
        write_metrics(&dir.join(trial_file(i)), rows)?;
    }
    write_metrics(&dir.join(MEAN_FILE), &report.mean)?;
    write_pairs(&dir.join(META_FILE), &meta_pairs(config, report))?;
    if config.bound_overlay {
        let bound = compute_bound(config, Some(&report.mean))?;
        write_bound(&dir.join(BOUND_FILE), &bound)?;
    }
    Ok(())
}

/// Validates inputs and the output directory, loads MNIST, runs all trials
/// and writes the result files.
pub fn run_experiment(config: &ExperimentConfig, out: &Path, exec: Execution) -> Result<ExperimentReport> {
    config.validate()?;
    check_inputs(config)?;
    prepare_output_dir(out)?;
    let data = Dataset::load(config)?;
    let report = run_trials(config, &data, exec)?;
    write_report(out, config, &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub params: BoundParams,
    pub trajectory: BoundTrajectory,
    pub surrogates: Option<SurrogateConstants>,
    /// Mean train loss per round from the trace, if any.
    pub observed_train_loss: Option<Vec<Option<f64>>>,
}

/// Assembles the bound inputs. `alpha_t` comes from `bound_alpha` when set,
/// otherwise from the trace's alpha column.
pub fn bound_params(
    config: &ExperimentConfig,
    trace: Option<&[RoundMetrics]>,
) -> Result<(BoundParams, Option<SurrogateConstants>)> {
    let (r_abs, k_abs) = config.resolved_ratios()?;
    let alpha = match (config.bound.alpha, trace) {
        (Some(a), _) => Schedule::Constant(a),
        (None, Some(rows)) => {
            if rows.len() < config.rounds {
                return Err(Error::Config(format!(
                    "bound trace has {} rounds, config asks for {}",
                    rows.len(),
                    config.rounds
                )));
            }
            let alphas = rows[..config.rounds]
                .iter()
                .map(|r| {
                    r.alpha.ok_or_else(|| {
                        Error::Config(format!(
                            "round {} of the bound trace has no alpha (ideal channel or skipped); set `bound_alpha`",
                            r.round
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Schedule::PerRound(alphas)
        }
        (None, None) => {
            return Err(Error::Config(
                "the bound needs `bound_alpha` or a `bound_trace` with an alpha column".into(),
            ))
        }
    };
    let mut params = BoundParams {
        smoothness: config.bound.smoothness,
        mu: config.bound.mu,
        g2: config.bound.g2,
        sigma2: config.bound.sigma2,
        beta: config.bound.beta,
        heterogeneity: config.bound.heterogeneity,
        d: PARAM_DIM,
        r_abs,
        k_abs,
        tau: config.tau,
        rounds: config.rounds,
        eta: Schedule::Constant(config.eta),
        alpha,
        antennas: config.antennas,
        clients: config.clients,
        sigma_h2: config.sigma_h2,
        sigma_z2: config.sigma_z2,
        theta0_dist2: config.bound.theta0_dist2,
    };
    let surrogates = match (config.bound.surrogates, trace) {
        (false, _) => None,
        (true, None) => return Err(Error::Config("`bound_surrogates` needs a trace".into())),
        (true, Some(rows)) => {
            let s = estimate_constants(&ConstantTrace {
                grad_norm_sq: rows.iter().map(|r| r.max_grad_norm_sq).collect(),
                buffer_ratios: rows.iter().filter_map(|r| r.buffer_ratio).collect(),
            })?;
            if let Some(g2) = s.g2 {
                params.g2 = g2;
            }
            if let Some(beta) = s.beta {
                params.beta = beta;
            }
            Some(s)
        }
    };
    Ok((params, surrogates))
}

pub fn compute_bound(config: &ExperimentConfig, trace: Option<&[RoundMetrics]>) -> Result<BoundReport> {
    let (params, surrogates) = bound_params(config, trace)?;
    let trajectory = bound_trajectory(&params)?;
    Ok(BoundReport {
        params,
        trajectory,
        surrogates,
        observed_train_loss: trace.map(|rows| rows.iter().map(|r| r.train_loss).collect()),
    })
}

#[derive(Serialize)]
struct BoundRow {
    round: usize,
    bound: f64,
    observed_train_loss: Option<f64>,
    d: Option<f64>,
    q: Option<f64>,
    q_compression: Option<f64>,
    q_interference: Option<f64>,
    q_local_drift: Option<f64>,
    q_local_variance: Option<f64>,
    q_noise: Option<f64>,
    comp_error_bound: Option<f64>,
    channel_error_bound: Option<f64>,
}

/// One row per round `t = 0..=T`; the per-round terms describe the step
/// from `t` to `t + 1` and are empty on the last row.
pub fn write_bound(path: &Path, report: &BoundReport) -> Result<()> {
    let p = &report.params;
    let g = gamma(p.k_abs, p.r_abs, p.d, p.beta)?;
    let rows: Vec<BoundRow> = report
        .trajectory
        .values
        .iter()
        .enumerate()
        .map(|(t, &bound)| {
            let step = (t < p.rounds).then(|| q_terms(p, g, t));
            BoundRow {
                round: t,
                bound,
                observed_train_loss: t
                    .checked_sub(1)
                    .and_then(|i| *report.observed_train_loss.as_ref()?.get(i)?),
                d: report.trajectory.d.get(t).copied(),
                q: report.trajectory.q.get(t).copied(),
                q_compression: step.map(|q| q.compression),
                q_interference: step.map(|q| q.interference),
                q_local_drift: step.map(|q| q.local_drift),
                q_local_variance: step.map(|q| q.local_variance),
                q_noise: step.map(|q| q.noise),
                comp_error_bound: step.map(|_| comp_error_bound(p, g, t)),
                channel_error_bound: step.map(|_| channel_error_bound(p, t)),
            }
        })
        .collect();
    write_csv(path, &rows)?;

    let mut pairs = vec![
        ("gamma".to_string(), g.to_string()),
        ("diverging".to_string(), report.trajectory.diverging.to_string()),
    ];
    match &report.surrogates {
        Some(s) => pairs.extend(s.describe().into_iter().map(|(k, v)| (k.to_string(), v))),
        None => pairs.push(("constants".into(), "user-supplied".into())),
    }
    write_pairs(&meta_path(path), &pairs)
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta");
    path.with_file_name(name)
}

/// The `bound` command: reads an optional trace, writes the bound table.
pub fn run_bound(config: &ExperimentConfig, out: &Path) -> Result<BoundReport> {
    config.validate()?;
    let trace = match &config.bound.trace {
        Some(p) => Some(read_metrics(p)?),
        None => None,
    };
    let report = compute_bound(config, trace.as_deref())?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_bound(out, &report)?;
    Ok(report)
}
