//! Experiment configuration: flat `key=value` files, presets, and
//! command-line overrides.
//!
//! Resolution order is defaults, then the preset (wherever `preset=` appears),
//! then file entries in order, then overrides in order. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use crate::data::{MnistPaths, PartitionMode};
use crate::error::{Error, Result};
use crate::model::{PixelScaling, TrainingSchedule, PARAM_DIM};
use crate::selection::{resolve_ratios, SelectionRule};
use crate::channel::ChannelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelMode {
    Faded,
    Ideal,
}

impl ChannelMode {
    pub fn name(self) -> &'static str {
        match self {
            ChannelMode::Faded => "faded",
            ChannelMode::Ideal => "ideal",
        }
    }
}

impl std::str::FromStr for ChannelMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "faded" => Ok(ChannelMode::Faded),
            "ideal" => Ok(ChannelMode::Ideal),
            other => Err(format!("expected one of faded, ideal; got `{other}`")),
        }
    }
}

/// The four experiment setups of the evaluation section.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Antenna sweep: M=10 single-label, tau=3, r=0.9, k=0.2, sigma_h2=1, sigma_z2=5, P=10.
    Fig1,
    /// AgeTop-k vs rTop-k on a good channel: fig1 with N=1000, sigma_z2=0.1.
    Fig2,
    /// Severe channel k sweep: M=20 IID, tau=1, N=10, r=0.75, P=1, sigma_z2=50, k=0.3.
    Fig3a,
    /// Good channel k sweep: fig3a with P=10, sigma_z2=1, k=0.75.
    Fig3b,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Fig1, Preset::Fig2, Preset::Fig3a, Preset::Fig3b];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Fig1 => "fig1",
            Preset::Fig2 => "fig2",
            Preset::Fig3a => "fig3a",
            Preset::Fig3b => "fig3b",
        }
    }

    fn apply(self, c: &mut ExperimentConfig) {
        let base = ExperimentConfig::default();
        c.eta = base.eta;
        c.batch_size = base.batch_size;
        c.rounds = base.rounds;
        c.trials = base.trials;
        c.sigma_h2 = 1.0;
        c.selection_rule = SelectionRule::AgeTopK;
        c.channel_mode = ChannelMode::Faded;
        match self {
            Preset::Fig1 | Preset::Fig2 => {
                c.clients = 10;
                c.partition = PartitionMode::SingleLabel;
                c.tau = 3;
                c.r_ratio = 0.9;
                c.k_ratio = 0.2;
                c.p_bar = 10.0;
                c.antennas = 1000;
                c.sigma_z2 = if self == Preset::Fig1 { 5.0 } else { 0.1 };
            }
            Preset::Fig3a | Preset::Fig3b => {
                c.clients = 20;
                c.partition = PartitionMode::Iid;
                c.tau = 1;
                c.antennas = 10;
                c.r_ratio = 0.75;
                if self == Preset::Fig3a {
                    c.p_bar = 1.0;
                    c.sigma_z2 = 50.0;
                    c.k_ratio = 0.3;
                } else {
                    c.p_bar = 10.0;
                    c.sigma_z2 = 1.0;
                    c.k_ratio = 0.75;
                }
            }
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("expected one of fig1, fig2, fig3a, fig3b; got `{s}`"))
    }
}

/// Constants for the convergence-bound calculator.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundSettings {
    pub smoothness: f64,
    pub mu: f64,
    pub g2: f64,
    pub sigma2: f64,
    pub beta: f64,
    pub heterogeneity: f64,
    pub theta0_dist2: f64,
    /// Constant power scaling; otherwise taken from a metrics trace.
    pub alpha: Option<f64>,
    /// Metrics CSV supplying realised alpha_t (and surrogate constants).
    pub trace: Option<PathBuf>,
    /// Replace G^2 and beta by trace maxima.
    pub surrogates: bool,
}

impl Default for BoundSettings {
    fn default() -> Self {
        Self {
            smoothness: 1.0,
            mu: 0.01,
            g2: 1.0,
            sigma2: 1.0,
            beta: 1.0,
            heterogeneity: 0.0,
            theta0_dist2: 1.0,
            alpha: None,
            trace: None,
            surrogates: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub clients: usize,
    pub antennas: usize,
    pub rounds: usize,
    pub tau: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub r_ratio: f64,
    pub k_ratio: f64,
    pub selection_rule: SelectionRule,
    pub channel_mode: ChannelMode,
    pub sigma_h2: f64,
    pub sigma_z2: f64,
    pub p_bar: f64,
    pub partition: PartitionMode,
    pub trials: usize,
    pub master_seed: u64,
    pub data: Option<MnistPaths>,
    pub samples_per_client: Option<usize>,
    pub pixel_scaling: PixelScaling,
    /// Evaluate the loss on all client training data every round.
    pub eval_train_loss: bool,
    pub out: Option<PathBuf>,
    pub bound_overlay: bool,
    pub bound: BoundSettings,
    pub preset: Option<Preset>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut c = Self {
            clients: 10,
            antennas: 1000,
            rounds: 100,
            tau: 3,
            eta: 0.001,
            batch_size: 32,
            r_ratio: 0.9,
            k_ratio: 0.2,
            selection_rule: SelectionRule::AgeTopK,
            channel_mode: ChannelMode::Faded,
            sigma_h2: 1.0,
            sigma_z2: 5.0,
            p_bar: 10.0,
            partition: PartitionMode::SingleLabel,
            trials: 5,
            master_seed: 2024,
            data: None,
            samples_per_client: None,
            pixel_scaling: PixelScaling::default(),
            eval_train_loss: true,
            out: None,
            bound_overlay: false,
            bound: BoundSettings::default(),
            preset: None,
        };
        c.data = std::env::var_os("MNIST_DIR").map(|d| MnistPaths::in_dir(Path::new(&d)));
        c
    }
}

pub const KEYS: &[&str] = &[
    "preset",
    "clients",
    "antennas",
    "rounds",
    "tau",
    "eta",
    "batch_size",
    "r_ratio",
    "k_ratio",
    "selection_rule",
    "channel_mode",
    "sigma_h2",
    "sigma_z2",
    "p_bar",
    "partition",
    "trials",
    "master_seed",
    "mnist_dir",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "samples_per_client",
    "pixel_scaling",
    "eval_train_loss",
    "out",
    "bound_overlay",
    "bound_l",
    "bound_mu",
    "bound_g2",
    "bound_sigma2",
    "bound_beta",
    "bound_gamma",
    "bound_theta0_dist2",
    "bound_alpha",
    "bound_trace",
    "bound_surrogates",
];

fn canonical_key(key: &str) -> String {
    let key = key.trim().replace('-', "_");
    match key.as_str() {
        "M" => "clients".into(),
        "N" => "antennas".into(),
        "T" => "rounds".into(),
        "partition_mode" => "partition".into(),
        _ => key,
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn optional_count(key: &str, value: &str) -> Result<Option<usize>> {
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Turns `--key value` / `--key=value` arguments into pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        let flag = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected `--key value`, got `{arg}`")))?;
        match flag.split_once('=') {
            Some((k, v)) => pairs.push((k.to_string(), v.to_string())),
            None => {
                let v = iter
                    .next()
                    .ok_or_else(|| Error::Config(format!("`--{flag}` needs a value")))?;
                pairs.push((flag.to_string(), v.clone()));
            }
        }
    }
    Ok(pairs)
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut c = Self::default();
        preset.apply(&mut c);
        c.preset = Some(preset);
        c
    }

    /// Builds a configuration from optional file contents plus overrides, and validates it.
    pub fn from_sources(file: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match file {
            Some(text) => parse_pairs(text)?,
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        let mut config = Self::default();
        let pairs: Vec<(String, String)> = pairs.into_iter().map(|(k, v)| (canonical_key(&k), v)).collect();
        if let Some((_, name)) = pairs.iter().rev().find(|(k, _)| k == "preset") {
            let preset: Preset = parse_value("preset", name)?;
            preset.apply(&mut config);
            config.preset = Some(preset);
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::from_sources(text.as_deref(), overrides)
    }

    fn data_mut(&mut self) -> &mut MnistPaths {
        self.data.get_or_insert_with(|| MnistPaths::in_dir(Path::new(".")))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = canonical_key(key);
        let v = value.trim();
        match key.as_str() {
            "preset" => {
                let p: Preset = parse_value(&key, v)?;
                p.apply(self);
                self.preset = Some(p);
            }
            "clients" => self.clients = parse_value(&key, v)?,
            "antennas" => self.antennas = parse_value(&key, v)?,
            "rounds" => self.rounds = parse_value(&key, v)?,
            "tau" => self.tau = parse_value(&key, v)?,
            "eta" => self.eta = parse_value(&key, v)?,
            "batch_size" => self.batch_size = parse_value(&key, v)?,
            "r_ratio" => self.r_ratio = parse_value(&key, v)?,
            "k_ratio" => self.k_ratio = parse_value(&key, v)?,
            "selection_rule" => self.selection_rule = parse_value(&key, v)?,
            "channel_mode" => self.channel_mode = parse_value(&key, v)?,
            "sigma_h2" => self.sigma_h2 = parse_value(&key, v)?,
            "sigma_z2" => self.sigma_z2 = parse_value(&key, v)?,
            "p_bar" => self.p_bar = parse_value(&key, v)?,
            "partition" => self.partition = parse_value(&key, v)?,
            "trials" => self.trials = parse_value(&key, v)?,
            "master_seed" => self.master_seed = parse_value(&key, v)?,
            "mnist_dir" => self.data = Some(MnistPaths::in_dir(Path::new(v))),
            "train_images" => self.data_mut().train_images = v.into(),
            "train_labels" => self.data_mut().train_labels = v.into(),
            "test_images" => self.data_mut().test_images = v.into(),
            "test_labels" => self.data_mut().test_labels = v.into(),
            "samples_per_client" => self.samples_per_client = optional_count(&key, v)?,
            "pixel_scaling" => self.pixel_scaling = parse_value(&key, v)?,
            "eval_train_loss" => self.eval_train_loss = parse_bool(&key, v)?,
            "out" => self.out = Some(v.into()),
            "bound_overlay" => self.bound_overlay = parse_bool(&key, v)?,
            "bound_l" => self.bound.smoothness = parse_value(&key, v)?,
            "bound_mu" => self.bound.mu = parse_value(&key, v)?,
            "bound_g2" => self.bound.g2 = parse_value(&key, v)?,
            "bound_sigma2" => self.bound.sigma2 = parse_value(&key, v)?,
            "bound_beta" => self.bound.beta = parse_value(&key, v)?,
            "bound_gamma" => self.bound.heterogeneity = parse_value(&key, v)?,
            "bound_theta0_dist2" => self.bound.theta0_dist2 = parse_value(&key, v)?,
            "bound_alpha" => self.bound.alpha = Some(parse_value(&key, v)?),
            "bound_trace" => self.bound.trace = Some(v.into()),
            "bound_surrogates" => self.bound.surrogates = parse_bool(&key, v)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}` (valid keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("`{field}`: {msg}")));
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                bad(field, format!("must be > 0, got {v}"))
            }
        };
        for (field, v) in [
            ("clients", self.clients),
            ("antennas", self.antennas),
            ("rounds", self.rounds),
            ("tau", self.tau),
            ("batch_size", self.batch_size),
            ("trials", self.trials),
        ] {
            if v == 0 {
                return bad(field, "must be >= 1".into());
            }
        }
        positive("eta", self.eta)?;
        positive("sigma_h2", self.sigma_h2)?;
        positive("p_bar", self.p_bar)?;
        if !(self.sigma_z2 >= 0.0 && self.sigma_z2.is_finite()) {
            return bad("sigma_z2", format!("must be >= 0, got {}", self.sigma_z2));
        }
        for (field, v) in [("r_ratio", self.r_ratio), ("k_ratio", self.k_ratio)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(field, format!("must be in (0, 1], got {v}"));
            }
        }
        resolve_ratios(PARAM_DIM, self.r_ratio, self.k_ratio).map_err(|e| Error::Config(e.to_string()))?;
        if self.samples_per_client == Some(0) {
            return bad("samples_per_client", "must be >= 1".into());
        }
        if self.partition == PartitionMode::SingleLabel && self.clients > 10 {
            return bad("clients", format!("single-label partition supports at most 10 clients, got {}", self.clients));
        }
        if let Some(a) = self.bound.alpha {
            positive("bound_alpha", a)?;
        }
        Ok(())
    }

    pub fn require_data(&self) -> Result<&MnistPaths> {
        self.data.as_ref().ok_or_else(|| {
            Error::Config("missing required key `mnist_dir` (or train_images/train_labels/test_images/test_labels)".into())
        })
    }

    /// `(r_abs, k_abs)` for the model dimension.
    pub fn resolved_ratios(&self) -> Result<(usize, usize)> {
        resolve_ratios(PARAM_DIM, self.r_ratio, self.k_ratio)
    }

    pub fn schedule(&self) -> TrainingSchedule {
        TrainingSchedule {
            eta: self.eta,
            tau: self.tau,
            batch_size: self.batch_size,
            rounds: self.rounds,
        }
    }

    pub fn channel(&self) -> ChannelConfig {
        ChannelConfig {
            antennas: self.antennas,
            clients: self.clients,
            sigma_h2: self.sigma_h2,
            sigma_z2: self.sigma_z2,
            p_bar: self.p_bar,
        }
    }

    /// Fully-resolved settings as `key = value` pairs, in a fixed order.
    pub fn resolved_pairs(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let path = |p: &Path| p.display().to_string();
        let data = self.data.as_ref();
        vec![
            ("preset", opt(self.preset.map(|p| p.name().into()))),
            ("clients", self.clients.to_string()),
            ("antennas", self.antennas.to_string()),
            ("rounds", self.rounds.to_string()),
            ("tau", self.tau.to_string()),
            ("eta", self.eta.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("r_ratio", self.r_ratio.to_string()),
            ("k_ratio", self.k_ratio.to_string()),
            ("selection_rule", self.selection_rule.name().into()),
            ("channel_mode", self.channel_mode.name().into()),
            ("sigma_h2", self.sigma_h2.to_string()),
            ("sigma_z2", self.sigma_z2.to_string()),
            ("p_bar", self.p_bar.to_string()),
            ("partition", self.partition.name().into()),
            ("trials", self.trials.to_string()),
            ("master_seed", self.master_seed.to_string()),
            ("train_images", opt(data.map(|d| path(&d.train_images)))),
            ("train_labels", opt(data.map(|d| path(&d.train_labels)))),
            ("test_images", opt(data.map(|d| path(&d.test_images)))),
            ("test_labels", opt(data.map(|d| path(&d.test_labels)))),
            ("samples_per_client", opt(self.samples_per_client.map(|v| v.to_string()))),
            ("pixel_scaling", self.pixel_scaling.name().into()),
            ("eval_train_loss", self.eval_train_loss.to_string()),
            ("bound_overlay", self.bound_overlay.to_string()),
            ("bound_l", self.bound.smoothness.to_string()),
            ("bound_mu", self.bound.mu.to_string()),
            ("bound_g2", self.bound.g2.to_string()),
            ("bound_sigma2", self.bound.sigma2.to_string()),
            ("bound_beta", self.bound.beta.to_string()),
            ("bound_gamma", self.bound.heterogeneity.to_string()),
            ("bound_theta0_dist2", self.bound.theta0_dist2.to_string()),
            ("bound_alpha", opt(self.bound.alpha.map(|v| v.to_string()))),
            ("bound_trace", opt(self.bound.trace.as_deref().map(path))),
            ("bound_surrogates", self.bound.surrogates.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overrides(args: &[&str]) -> Vec<(String, String)> {
        parse_overrides(&args.iter().map(|s| s.to_string()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn flags_override_file() {
        let c = ExperimentConfig::from_sources(Some("eta=0.001\n"), &overrides(&["--eta", "0.01"])).unwrap();
        assert_eq!(c.eta, 0.01);
        let c = ExperimentConfig::from_sources(Some("eta = 0.001 # comment\n"), &overrides(&["--eta=0.02"])).unwrap();
        assert_eq!(c.eta, 0.02);
    }

    #[test]
    fn zero_k_ratio_names_field() {
        let err = ExperimentConfig::from_sources(Some("k_ratio=0"), &[]).unwrap_err();
        assert!(err.to_string().contains("k_ratio"), "{err}");
    }

    #[test]
    fn enums_parse_or_list_choices() {
        let c = ExperimentConfig::from_sources(Some("selection_rule=agetopk"), &[]).unwrap();
        assert_eq!(c.selection_rule, SelectionRule::AgeTopK);
        let c = ExperimentConfig::from_sources(Some("selection_rule=rtopk"), &[]).unwrap();
        assert_eq!(c.selection_rule, SelectionRule::RandomTopK);
        let err = ExperimentConfig::from_sources(Some("selection_rule=foo"), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("agetopk") && msg.contains("rtopk"), "{msg}");
    }

    #[test]
    fn unknown_and_malformed_keys() {
        let err = ExperimentConfig::from_sources(Some("etaa=0.1"), &[]).unwrap_err();
        assert!(err.to_string().contains("unknown key `etaa`"));
        assert!(ExperimentConfig::from_sources(Some("just words"), &[]).is_err());
        assert!(parse_overrides(&["eta".to_string()]).is_err());
        assert!(parse_overrides(&["--eta".to_string()]).is_err());
    }

    #[test]
    fn range_validation() {
        for bad in ["clients=0", "trials=0", "eta=-1", "p_bar=0", "sigma_z2=-0.5", "r_ratio=1.5", "tau=0", "sigma_h2=0"] {
            assert!(ExperimentConfig::from_sources(Some(bad), &[]).is_err(), "{bad}");
        }
        assert!(ExperimentConfig::from_sources(Some("partition=single-label\nclients=11"), &[]).is_err());
    }

    #[test]
    fn presets_apply_before_other_keys() {
        // the preset line comes last but explicit keys still win
        let c = ExperimentConfig::from_sources(Some("antennas=50\npreset=fig1"), &[]).unwrap();
        assert_eq!(c.antennas, 50);
        assert_eq!(c.partition, PartitionMode::SingleLabel);
        assert_eq!(c.sigma_z2, 5.0);

        let c = ExperimentConfig::from_sources(None, &overrides(&["--preset", "fig3a"])).unwrap();
        assert_eq!((c.clients, c.tau, c.antennas), (20, 1, 10));
        assert_eq!((c.r_ratio, c.k_ratio, c.p_bar, c.sigma_z2), (0.75, 0.3, 1.0, 50.0));
        assert_eq!(c.partition, PartitionMode::Iid);

        let c = ExperimentConfig::preset(Preset::Fig3b);
        assert_eq!((c.p_bar, c.sigma_z2, c.k_ratio), (10.0, 1.0, 0.75));
        let c = ExperimentConfig::preset(Preset::Fig2);
        assert_eq!((c.antennas, c.p_bar, c.sigma_z2), (1000, 10.0, 0.1));
    }

    #[test]
    fn aliases_and_paths() {
        let c = ExperimentConfig::from_sources(Some("M=4\nN=7\nT=9\nmnist_dir=/data/mnist"), &[]).unwrap();
        assert_eq!((c.clients, c.antennas, c.rounds), (4, 7, 9));
        let d = c.require_data().unwrap();
        assert_eq!(d.train_images, PathBuf::from("/data/mnist/train-images-idx3-ubyte"));
        let c = ExperimentConfig::from_sources(Some("samples_per_client=200"), &[]).unwrap();
        assert_eq!(c.samples_per_client, Some(200));
    }

    #[test]
    fn resolved_pairs_cover_keys() {
        let c = ExperimentConfig::preset(Preset::Fig1);
        let keys: Vec<&str> = c.resolved_pairs().iter().map(|(k, _)| *k).collect();
        for k in keys {
            assert!(KEYS.contains(&k), "{k}");
        }
        // every resolved pair parses back to the same config
        let text: String = c
            .resolved_pairs()
            .into_iter()
            .filter(|(_, v)| v != "none")
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let mut back = ExperimentConfig::from_sources(Some(&text), &[]).unwrap();
        back.data = c.data.clone();
        assert_eq!(back, c);
    }
}
