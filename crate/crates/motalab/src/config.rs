//! Experiment configuration: a sectioned TOML file covering the stream, the
//! architectures, every strategy's knobs, the seed list, and the landscape
//! exporter. Parsing resolves defaults, validation enforces the capacity
//! rules, and the content hash names the run directory.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{check_capacity_fairness, RunSettings, Strategy};
use crate::error::{Error, Result};
use crate::mota::{BacktrackConfig, ModeTrainConfig};
use crate::nn::{Activation, NetworkSpec};
use crate::stream::StreamSpec;

fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}

fn default_activation() -> String {
    "relu".into()
}

/// Single-network architecture section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: String,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection { hidden: default_hidden(), activation: default_activation() }
    }
}

fn default_num_modes() -> usize {
    2
}

fn default_mode_hidden() -> Vec<usize> {
    vec![19, 19]
}

fn default_beta_max() -> f64 {
    100.0
}

fn default_beta_min() -> f64 {
    1000.0
}

fn default_drift_weight() -> f64 {
    0.1
}

fn default_combo_cap() -> usize {
    4096
}

/// Multi-mode strategy section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotaSection {
    #[serde(default = "default_num_modes")]
    pub num_modes: usize,
    #[serde(default = "default_mode_hidden")]
    pub mode_hidden: Vec<usize>,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_drift_weight")]
    pub drift_weight: f64,
    #[serde(default = "default_combo_cap")]
    pub combo_cap: usize,
}

impl Default for MotaSection {
    fn default() -> Self {
        MotaSection {
            num_modes: default_num_modes(),
            mode_hidden: default_mode_hidden(),
            beta_max: default_beta_max(),
            beta_min: default_beta_min(),
            drift_weight: default_drift_weight(),
            combo_cap: default_combo_cap(),
        }
    }
}

fn default_ewc_lambda() -> f64 {
    1000.0
}

/// Reference-strategy section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    #[serde(default = "default_ewc_lambda")]
    pub ewc_lambda: f64,
    /// Mode count for the ensemble variants; defaults to the multi-mode
    /// count.
    #[serde(default)]
    pub ensemble_modes: Option<usize>,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection { ewc_lambda: default_ewc_lambda(), ensemble_modes: None }
    }
}

fn default_epochs() -> usize {
    40
}

fn default_lr() -> f64 {
    0.05
}

fn default_batch_size() -> usize {
    64
}

fn default_fisher_samples() -> usize {
    200
}

/// Optimization section shared by every strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_fisher_samples")]
    pub fisher_samples: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            lr: default_lr(),
            batch_size: default_batch_size(),
            fisher_samples: default_fisher_samples(),
        }
    }
}

fn default_strategies() -> Vec<String> {
    Strategy::ALL.iter().map(|s| s.name().to_string()).collect()
}

fn default_master_seed() -> u64 {
    3407
}

fn default_seeds() -> Vec<u64> {
    (1..=10).collect()
}

fn default_out_dir() -> String {
    "runs".into()
}

/// Orchestration section: what to run, with which seeds, where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_strategies")]
    pub strategies: Vec<String>,
    #[serde(default = "default_master_seed")]
    pub master_seed: u64,
    /// Replicate indices; each becomes one column of cells.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            strategies: default_strategies(),
            master_seed: default_master_seed(),
            seeds: default_seeds(),
            out_dir: default_out_dir(),
        }
    }
}

fn default_steps() -> usize {
    41
}

fn default_range_factor() -> f64 {
    1.5
}

/// Landscape exporter section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_range_factor")]
    pub range_factor: f64,
}

impl Default for LandscapeSection {
    fn default() -> Self {
        LandscapeSection { enabled: false, steps: default_steps(), range_factor: default_range_factor() }
    }
}

/// The whole experiment file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub stream: StreamSpec,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub mota: MotaSection,
    #[serde(default)]
    pub baselines: BaselineSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub landscape: LandscapeSection,
}

fn parse_activation(s: &str) -> Result<Activation> {
    match s {
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        other => Err(Error::Config(format!("network.activation `{other}` (expected relu or tanh)"))),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn strategies(&self) -> Result<Vec<Strategy>> {
        let list = self
            .run
            .strategies
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<Strategy>>>()?;
        if list.is_empty() {
            return Err(Error::Config("run.strategies is empty".into()));
        }
        Ok(list)
    }

    pub fn base_spec(&self) -> Result<NetworkSpec> {
        Ok(NetworkSpec::new(
            self.stream.input_dim,
            self.network.hidden.clone(),
            self.stream.num_classes(),
            parse_activation(&self.network.activation)?,
        ))
    }

    pub fn mode_spec(&self) -> Result<NetworkSpec> {
        Ok(NetworkSpec::new(
            self.stream.input_dim,
            self.mota.mode_hidden.clone(),
            self.stream.num_classes(),
            parse_activation(&self.network.activation)?,
        ))
    }

    pub fn ensemble_modes(&self) -> usize {
        self.baselines.ensemble_modes.unwrap_or(self.mota.num_modes)
    }

    pub fn validate(&self) -> Result<()> {
        let strategies = self.strategies()?;
        parse_activation(&self.network.activation)?;
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds is empty".into()));
        }
        {
            let mut sorted = self.run.seeds.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.run.seeds.len() {
                return Err(Error::Config("run.seeds contains duplicates".into()));
            }
        }
        if self.train.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.train.lr)));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.train.fisher_samples == 0 {
            return Err(Error::Config("train.fisher_samples must be at least 1".into()));
        }
        if self.mota.num_modes == 0 {
            return Err(Error::Config("mota.num_modes must be at least 1".into()));
        }
        if !(self.mota.beta_max.is_finite() && self.mota.beta_max >= 0.0) {
            return Err(Error::Config(format!("mota.beta_max must be non-negative, got {}", self.mota.beta_max)));
        }
        if !(self.mota.beta_min.is_finite() && self.mota.beta_min >= 0.0) {
            return Err(Error::Config(format!("mota.beta_min must be non-negative, got {}", self.mota.beta_min)));
        }
        if !(self.mota.drift_weight.is_finite() && self.mota.drift_weight >= 0.0) {
            return Err(Error::Config(format!(
                "mota.drift_weight must be non-negative, got {}",
                self.mota.drift_weight
            )));
        }
        if self.mota.combo_cap == 0 {
            return Err(Error::Config("mota.combo_cap must be at least 1".into()));
        }
        if !(self.baselines.ewc_lambda.is_finite() && self.baselines.ewc_lambda >= 0.0) {
            return Err(Error::Config(format!(
                "baselines.ewc_lambda must be non-negative, got {}",
                self.baselines.ewc_lambda
            )));
        }
        if self.landscape.steps < 3 || self.landscape.steps % 2 == 0 {
            return Err(Error::Config(format!(
                "landscape.steps must be odd and >= 3, got {}",
                self.landscape.steps
            )));
        }
        if !(self.landscape.range_factor.is_finite() && self.landscape.range_factor > 0.0) {
            return Err(Error::Config(format!(
                "landscape.range_factor must be positive, got {}",
                self.landscape.range_factor
            )));
        }
        self.stream.validate()?;

        let base = self.base_spec()?;
        let mode = self.mode_spec()?;
        if strategies.contains(&Strategy::Mota) {
            check_capacity_fairness(&base, &mode, self.mota.num_modes)?;
        }
        if strategies.contains(&Strategy::EnsembleDistmax) || strategies.contains(&Strategy::EnsembleSeeds) {
            check_capacity_fairness(&base, &mode, self.ensemble_modes())?;
        }
        Ok(())
    }

    /// First 12 hex characters of the SHA-256 of the resolved config. Field
    /// order is fixed by the struct, so TOML key order cannot change the
    /// hash. The output location is excluded: where results land does not
    /// change what the experiment is.
    pub fn hash(&self) -> Result<String> {
        let mut identity = self.clone();
        identity.run.out_dir = String::new();
        let canonical = serde_json::to_string(&identity).map_err(|e| Error::Serde(e.to_string()))?;
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(12);
        for b in digest.iter().take(6) {
            hex.push_str(&format!("{b:02x}"));
        }
        Ok(hex)
    }

    /// Settings bundle passed to every strategy.
    pub fn run_settings(&self, capture_epochs: bool) -> Result<RunSettings> {
        Ok(RunSettings {
            base_spec: self.base_spec()?,
            mode_spec: self.mode_spec()?,
            num_modes: self.mota.num_modes,
            beta_max: self.mota.beta_max,
            beta_min: self.mota.beta_min,
            ewc_lambda: self.baselines.ewc_lambda,
            ensemble_modes: self.ensemble_modes(),
            train: ModeTrainConfig {
                epochs: self.train.epochs,
                lr: self.train.lr,
                batch_size: self.train.batch_size,
                fisher_samples: self.train.fisher_samples,
            },
            backtrack: BacktrackConfig {
                drift_weight: self.mota.drift_weight,
                combo_cap: self.mota.combo_cap,
            },
            capture_epochs,
        })
    }

    /// Header notes on where the shipped defaults deviate from the
    /// literature constants they stand in for.
    pub fn deviation_notes(&self) -> Vec<String> {
        let mut notes = Vec::new();
        if self.train.epochs != 200 {
            notes.push(format!("epochs 200 -> {}", self.train.epochs));
        }
        if self.train.batch_size != 512 {
            notes.push(format!("batch 512 -> {}", self.train.batch_size));
        }
        notes.push("AdamW -> constant-rate descent".into());
        notes
    }
}
