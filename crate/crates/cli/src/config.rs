//! TOML configuration files. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use hion_core::controller::DEFAULT_HIDDEN;
use hion_core::simulator::{Sampling, Scenario};
use hion_core::slmpc::SlmpcConfig;
use hion_core::{Cost, SystemId, TrainConfig};

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub id: SystemId,
    pub t_f: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_hidden")]
    pub state_hidden: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub costate_hidden: Vec<usize>,
}

fn default_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            state_hidden: default_hidden(),
            costate_hidden: default_hidden(),
        }
    }
}

/// `train` and `finetune` configuration. For fine-tuning, `model` is
/// ignored and the parent checkpoint comes from `train.finetune_from`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub system: SystemSection,
    pub cost: Cost,
    #[serde(default)]
    pub model: Option<ModelSection>,
    pub train: TrainConfig,
}

/// Loads a training file. A missing `train.n_epochs` takes the default
/// for the configured system, so the raw table is patched before the typed
/// parse.
pub fn load_train(path: &Path) -> Result<TrainFile, CliError> {
    let mut table: toml::Table = load(path)?;
    let system = table
        .get("system")
        .and_then(|s| s.get("id"))
        .and_then(|v| v.as_str())
        .and_then(|id| id.parse::<SystemId>().ok());
    if let Some(id) = system {
        let train = table.entry("train").or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if let toml::Value::Table(train) = train {
            train
                .entry("n_epochs")
                .or_insert(toml::Value::Integer(id.default_epochs() as i64));
        }
    }
    table
        .try_into()
        .map_err(|e| CliError::Usage(anyhow::anyhow!("invalid config {}: {e}", path.display())))
}

/// A controller to run in closed loop, optionally over several sampling
/// periods. With no `samplings` the scenario's own sampling is used.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ControllerEntry {
    Hion {
        #[serde(default)]
        label: Option<String>,
        checkpoint: PathBuf,
        #[serde(default)]
        samplings: Vec<Sampling>,
    },
    Slmpc {
        #[serde(default)]
        label: Option<String>,
        horizon: f64,
        n_steps: usize,
        delta: f64,
        cost: Cost,
        #[serde(default)]
        u_bound: Option<f64>,
        #[serde(default)]
        samplings: Vec<Sampling>,
    },
}

impl ControllerEntry {
    pub fn kind(&self) -> &'static str {
        match self {
            ControllerEntry::Hion { .. } => "hion",
            ControllerEntry::Slmpc { .. } => "slmpc",
        }
    }

    pub fn label(&self) -> &str {
        match self {
            ControllerEntry::Hion { label, .. } | ControllerEntry::Slmpc { label, .. } => {
                label.as_deref().unwrap_or(self.kind())
            }
        }
    }

    pub fn samplings(&self, scenario: &Scenario) -> Vec<Sampling> {
        let s = match self {
            ControllerEntry::Hion { samplings, .. } | ControllerEntry::Slmpc { samplings, .. } => samplings,
        };
        if s.is_empty() {
            vec![scenario.sampling]
        } else {
            s.clone()
        }
    }

    pub fn slmpc_config(&self) -> Option<SlmpcConfig> {
        match *self {
            ControllerEntry::Slmpc {
                horizon,
                n_steps,
                delta,
                cost,
                u_bound,
                ..
            } => Some(SlmpcConfig {
                horizon,
                n_steps,
                delta,
                cost,
                u_bound,
            }),
            ControllerEntry::Hion { .. } => None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateFile {
    pub scenario: Scenario,
    pub controller: ControllerEntry,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareFile {
    pub scenario: Scenario,
    #[serde(rename = "controller")]
    pub controllers: Vec<ControllerEntry>,
}

/// Reads and parses a TOML file, mapping every failure to a usage error
/// that names the offending field.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(CliError::Usage)?;
    toml::from_str(&text)
        .map_err(|e| CliError::Usage(anyhow::anyhow!("invalid config {}: {e}", path.display())))
}

/// Resolves a path from a config file relative to the file's directory.
pub fn resolve(config_path: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}
