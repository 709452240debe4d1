//! One trial of the training loop, and multi-trial experiments.

use serde::{Deserialize, Serialize};

use super::config::{ChannelMode, ExperimentConfig};
use crate::channel::{compute_alpha, ideal_aggregate, modulate, reconstruct, transmit_and_combine, ChannelConfig};
use crate::data::{load_idx, partition, DatasetSplit};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{evaluate, fedavg_aggregate, local_sgd_traced, ClientDataset, GlobalModel, TrainingSchedule, PARAM_DIM};
use crate::rng::{derive_seed, Purpose, RoundSeeds};
use crate::selection::{compress, decompress, magnitude_ratio, SelectionState};

/// Per-round metrics. Every column is `f64` so trial means share the layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    /// Mean loss over all client training data; empty when not evaluated.
    pub train_loss: Option<f64>,
    /// Power scaling; empty on an ideal channel or a skipped round.
    pub alpha: Option<f64>,
    /// 1 if every update was zero and nothing was transmitted.
    pub skipped: f64,
    /// `||decompress(ideal aggregate) - fedavg||^2`.
    pub e_comp_sq: f64,
    /// `||received - ideal aggregate||^2` over the selected coordinates.
    pub e_channel_sq: f64,
    pub never_selected: f64,
    pub max_age: f64,
    /// Largest squared mini-batch gradient norm over all clients and steps.
    pub max_grad_norm_sq: f64,
    /// Largest over r-th largest buffer magnitude before selection.
    pub buffer_ratio: Option<f64>,
}

/// State of one trial: model, ages, buffer and the client data.
pub struct Simulation<'a> {
    config: &'a ExperimentConfig,
    clients: &'a [ClientDataset],
    test: &'a ClientDataset,
    trial: u64,
    exec: Execution,
    r_abs: usize,
    k_abs: usize,
    schedule: TrainingSchedule,
    channel: ChannelConfig,
    model: GlobalModel,
    selection: SelectionState,
    round: usize,
}

impl<'a> Simulation<'a> {
    pub fn new(
        config: &'a ExperimentConfig,
        clients: &'a [ClientDataset],
        test: &'a ClientDataset,
        trial: u64,
        exec: Execution,
    ) -> Result<Self> {
        config.validate()?;
        if clients.len() != config.clients {
            return Err(Error::DimensionMismatch {
                context: "client datasets",
                expected: config.clients,
                found: clients.len(),
            });
        }
        if let Some(m) = clients.iter().position(ClientDataset::is_empty) {
            return Err(Error::invalid("clients", format!("client {m} has no training data")));
        }
        if test.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (r_abs, k_abs) = config.resolved_ratios()?;
        Ok(Self {
            config,
            clients,
            test,
            trial,
            exec,
            r_abs,
            k_abs,
            schedule: config.schedule(),
            channel: config.channel(),
            model: GlobalModel::zeros(),
            selection: SelectionState::new(PARAM_DIM),
            round: 0,
        })
    }

    pub fn model(&self) -> &GlobalModel {
        &self.model
    }

    pub fn selection(&self) -> &SelectionState {
        &self.selection
    }

    pub fn round(&self) -> usize {
        self.round
    }

    /// Selection, local training, compression, transmission, reconstruction,
    /// global update, then age and buffer refresh.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let t = self.round;
        let seeds = RoundSeeds::new(self.config.master_seed, self.trial, t as u64);

        let buffer_ratio = magnitude_ratio(&self.selection.buffer, self.r_abs);
        let mut sel_rng = seeds.stream(Purpose::RandomSelection, 0);
        let spec = self
            .selection
            .select(self.config.selection_rule, self.r_abs, self.k_abs, &mut sel_rng)?;

        let model = &self.model;
        let schedule = &self.schedule;
        let clients = self.clients;
        let trained = self.exec.try_map(clients.len(), |m| {
            let mut rng = seeds.stream(Purpose::ClientBatches, m as u64);
            local_sgd_traced(model, &clients[m], schedule, m, &mut rng)
        })?;
        let max_grad_norm_sq = trained.iter().map(|(_, g)| *g).fold(0.0, f64::max);
        let updates: Vec<_> = trained.into_iter().map(|(u, _)| u).collect();

        let compressed = updates
            .iter()
            .map(|u| compress(&u.delta, &spec))
            .collect::<Result<Vec<_>>>()?;
        let ideal = ideal_aggregate(&compressed)?;
        let fedavg = fedavg_aggregate(&updates)?;

        let (received, alpha, skipped) = match self.config.channel_mode {
            ChannelMode::Ideal => (ideal.clone(), None, false),
            ChannelMode::Faded => match compute_alpha(&compressed, self.config.p_bar)? {
                None => (vec![0.0; ideal.len()], None, true),
                Some(alpha) => {
                    let symbols = compressed
                        .iter()
                        .map(|u| modulate(u, alpha))
                        .collect::<Result<Vec<_>>>()?;
                    let y = transmit_and_combine(&symbols, &self.channel, &seeds, alpha, self.exec)?;
                    (reconstruct(&y), Some(alpha), false)
                }
            },
        };
        if received.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "received aggregate",
            });
        }

        let delta_hat = decompress(&received, &spec, PARAM_DIM)?;
        self.model.apply_update(&delta_hat)?;
        self.selection.update_aoi(&spec);
        self.selection.refresh_buffer(&spec, &delta_hat)?;
        self.round += 1;

        let e_channel_sq = sq_dist(&received, &ideal);
        let e_comp_sq = sq_dist(&decompress(&ideal, &spec, PARAM_DIM)?, &fedavg);
        let test_eval = evaluate(&self.model, self.test, self.exec)?;
        let train_loss = if self.config.eval_train_loss {
            let mut total = 0.0;
            let mut n = 0usize;
            for c in self.clients {
                total += evaluate(&self.model, c, self.exec)?.loss * c.len() as f64;
                n += c.len();
            }
            Some(total / n as f64)
        } else {
            None
        };

        Ok(RoundMetrics {
            round: t + 1,
            test_accuracy: test_eval.accuracy,
            test_loss: test_eval.loss,
            train_loss,
            alpha,
            skipped: if skipped { 1.0 } else { 0.0 },
            e_comp_sq,
            e_channel_sq,
            never_selected: self.selection.never_selected() as f64,
            max_age: self.selection.max_age() as f64,
            max_grad_norm_sq,
            buffer_ratio,
        })
    }

    pub fn run(mut self) -> Result<Vec<RoundMetrics>> {
        (0..self.config.rounds).map(|_| self.run_round()).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Full MNIST train and test sets, loaded once and shared by all trials.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: ClientDataset,
    pub test: ClientDataset,
}

impl Dataset {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let paths = config.require_data()?;
        Ok(Self {
            train: load_idx(&paths.train_images, &paths.train_labels, config.pixel_scaling)?,
            test: load_idx(&paths.test_images, &paths.test_labels, config.pixel_scaling)?,
        })
    }
}

/// Seed for the trial's data partition; independent of the trial count.
pub fn trial_seed(config: &ExperimentConfig, trial: u64) -> u64 {
    derive_seed(config.master_seed, trial, 0, Purpose::Partition, 0)
}

pub fn split_for_trial(config: &ExperimentConfig, data: &Dataset, trial: u64) -> Result<DatasetSplit> {
    let mut rng = RoundSeeds::new(config.master_seed, trial, 0).stream(Purpose::Partition, 0);
    let train_clients = partition(
        &data.train,
        config.partition,
        config.clients,
        config.samples_per_client,
        &mut rng,
    )?;
    Ok(DatasetSplit {
        train_clients,
        test: data.test.clone(),
        partition_mode: config.partition,
    })
}

pub fn run_trial(config: &ExperimentConfig, data: &Dataset, trial: u64, exec: Execution) -> Result<Vec<RoundMetrics>> {
    let split = split_for_trial(config, data, trial)?;
    Simulation::new(config, &split.train_clients, &data.test, trial, exec)?.run()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub r_abs: usize,
    pub k_abs: usize,
    pub trials: Vec<Vec<RoundMetrics>>,
    pub mean: Vec<RoundMetrics>,
}

/// Runs every trial (in parallel when `exec` allows) and averages them.
pub fn run_trials(config: &ExperimentConfig, data: &Dataset, exec: Execution) -> Result<ExperimentReport> {
    config.validate()?;
    let (r_abs, k_abs) = config.resolved_ratios()?;
    let trials = exec.try_map(config.trials, |i| run_trial(config, data, i as u64, exec))?;
    let mean = mean_metrics(&trials)?;
    Ok(ExperimentReport {
        r_abs,
        k_abs,
        trials,
        mean,
    })
}

/// Column-wise mean across trials, summed in trial order. Optional
/// columns average the trials where they are present.
pub fn mean_metrics(trials: &[Vec<RoundMetrics>]) -> Result<Vec<RoundMetrics>> {
    let first = trials.first().ok_or_else(|| Error::invalid("trials", "need at least one"))?;
    if let Some(bad) = trials.iter().find(|t| t.len() != first.len()) {
        return Err(Error::DimensionMismatch {
            context: "trial lengths",
            expected: first.len(),
            found: bad.len(),
        });
    }
    let n = trials.len() as f64;
    let mean = |f: &dyn Fn(&RoundMetrics) -> f64, r: usize| trials.iter().map(|t| f(&t[r])).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&RoundMetrics) -> Option<f64>, r: usize| {
        let present: Vec<f64> = trials.iter().filter_map(|t| f(&t[r])).collect();
        if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        }
    };
    Ok((0..first.len())
        .map(|r| RoundMetrics {
            round: first[r].round,
            test_accuracy: mean(&|m| m.test_accuracy, r),
            test_loss: mean(&|m| m.test_loss, r),
            train_loss: mean_opt(&|m| m.train_loss, r),
            alpha: mean_opt(&|m| m.alpha, r),
            skipped: mean(&|m| m.skipped, r),
            e_comp_sq: mean(&|m| m.e_comp_sq, r),
            e_channel_sq: mean(&|m| m.e_channel_sq, r),
            never_selected: mean(&|m| m.never_selected, r),
            max_age: mean(&|m| m.max_age, r),
            max_grad_norm_sq: mean(&|m| m.max_grad_norm_sq, r),
            buffer_ratio: mean_opt(&|m| m.buffer_ratio, r),
        })
        .collect())
}
