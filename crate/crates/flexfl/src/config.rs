//! Experiment configuration: a single JSON-compatible document covering the
//! simulation loop, plan search, adaptive pruning, distillation, optimizer,
//! device classes, and data settings.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DataConfig;
use crate::error::{FlexError, Result};
use crate::kd::KdConfig;
use crate::nn::ModelArch;
use crate::pruner::AdaptiveConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Flexfl,
    Baseline,
    NoKd,
    NoAdaptive,
    NoApoz,
    NoAdjw,
}

impl FromStr for Mode {
    type Err = FlexError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flexfl" => Ok(Mode::Flexfl),
            "baseline" => Ok(Mode::Baseline),
            "no-kd" => Ok(Mode::NoKd),
            "no-adaptive" => Ok(Mode::NoAdaptive),
            "no-apoz" => Ok(Mode::NoApoz),
            "no-adjw" => Ok(Mode::NoAdjw),
            other => Err(FlexError::InvalidConfig(format!(
                "unknown mode '{other}' (expected flexfl|baseline|no-kd|no-adaptive|no-apoz|no-adjw)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Flexfl => "flexfl",
            Mode::Baseline => "baseline",
            Mode::NoKd => "no-kd",
            Mode::NoAdaptive => "no-adaptive",
            Mode::NoApoz => "no-apoz",
            Mode::NoAdjw => "no-adjw",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub proportion: f64,
    pub r_max: f64,
}

fn default_device_classes() -> Vec<ClassSpec> {
    vec![
        ClassSpec {
            name: "weak".into(),
            proportion: 0.4,
            r_max: 35.0,
        },
        ClassSpec {
            name: "medium".into(),
            proportion: 0.3,
            r_max: 60.0,
        },
        ClassSpec {
            name: "strong".into(),
            proportion: 0.3,
            r_max: 110.0,
        },
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: Mode,
    pub rounds: usize,
    pub num_devices: usize,
    pub fraction: f64,
    pub eval_every: usize,
    pub pool_targets: Vec<f64>,
    /// Hidden layer widths; input/output dims come from the data settings.
    pub hidden_widths: Vec<usize>,
    /// Optional contiguous grouping of hidden layers (block stand-in).
    pub layer_groups: Option<Vec<Vec<usize>>>,
    pub data: DataConfig,
    /// Plan-size tolerance as a fraction of the full parameter count.
    pub epsilon_frac: f64,
    /// Gamma sweep step.
    pub xi: f64,
    pub adaptive: AdaptiveConfig,
    pub kd: KdConfig,
    pub learning_rate: f64,
    pub momentum: f64,
    pub pretrain_epochs: usize,
    pub device_classes: Vec<ClassSpec>,
    pub sigma2_choices: Vec<f64>,
    /// Skip a device instead of force-training level 1 when even that
    /// exceeds its resource draw.
    pub skip_forced: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            mode: Mode::Flexfl,
            rounds: 200,
            num_devices: 20,
            fraction: 0.10,
            eval_every: 20,
            pool_targets: vec![0.25, 0.5, 1.0],
            hidden_widths: vec![32, 32],
            layer_groups: None,
            data: DataConfig::default(),
            epsilon_frac: 0.01,
            xi: 0.01,
            adaptive: AdaptiveConfig::default(),
            kd: KdConfig::default(),
            learning_rate: 0.01,
            momentum: 0.5,
            pretrain_epochs: 50,
            device_classes: default_device_classes(),
            sigma2_choices: vec![5.0, 8.0, 10.0],
            skip_forced: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fraction <= 0.0 || self.fraction > 1.0 {
            return Err(FlexError::InvalidConfig(
                "fraction must be in (0, 1]".into(),
            ));
        }
        if self.num_devices == 0 {
            return Err(FlexError::InvalidConfig("need at least one device".into()));
        }
        if self.eval_every == 0 {
            return Err(FlexError::InvalidConfig("eval_every must be >= 1".into()));
        }
        if self.pool_targets.is_empty() {
            return Err(FlexError::InvalidConfig("pool_targets is empty".into()));
        }
        if self.epsilon_frac <= 0.0 {
            return Err(FlexError::InvalidConfig("epsilon_frac must be > 0".into()));
        }
        if self.device_classes.is_empty() {
            return Err(FlexError::InvalidConfig("no device classes".into()));
        }
        if self.sigma2_choices.is_empty() || self.sigma2_choices.iter().any(|&v| v < 0.0) {
            return Err(FlexError::InvalidConfig(
                "sigma2_choices must be non-empty and non-negative".into(),
            ));
        }
        let prop: f64 = self.device_classes.iter().map(|c| c.proportion).sum();
        if (prop - 1.0).abs() > 1e-9 {
            return Err(FlexError::InvalidConfig(
                "device class proportions must sum to 1".into(),
            ));
        }
        self.data.validate()?;
        self.kd.validate()?;
        self.arch()?;
        Ok(())
    }

    pub fn arch(&self) -> Result<ModelArch> {
        let mut widths = vec![self.data.feature_dim];
        widths.extend(&self.hidden_widths);
        widths.push(self.data.classes);
        ModelArch::new(widths, self.layer_groups.clone())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    /// Stable hash of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())
    }
}

/// Written next to the metrics CSV after every completed run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub code_version: String,
    pub csv_schema: String,
    pub plan_dump_path: String,
    pub metrics_path: String,
    pub config_path: String,
    pub start_round: usize,
    pub end_round: usize,
}
