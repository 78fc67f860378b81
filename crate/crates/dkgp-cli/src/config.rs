//! The JSON run config. Unknown keys are rejected everywhere so typos fail
//! fast instead of silently training with defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use dkgp_core::train::{ScalableMode, TrainConfig};

use crate::CliError;

/// A field that accepts either `"name"` or `["a", "b"]`. `train` requires a
/// single value; `benchmark` sweeps the whole list.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    pub fn items(&self) -> Vec<String> {
        match self {
            OneOrMany::One(s) => vec![s.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }

    pub fn single(&self, field: &str) -> Result<String, CliError> {
        match self {
            OneOrMany::One(s) => Ok(s.clone()),
            OneOrMany::Many(v) if v.len() == 1 => Ok(v[0].clone()),
            OneOrMany::Many(v) => Err(CliError::config(format!(
                "'{field}' must name exactly one value for this command, got {}",
                v.len()
            ))),
        }
    }
}

/// Per-field overrides of the training defaults.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOverrides {
    pub lr0: Option<f64>,
    pub decay: Option<f64>,
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub scalable_mode: Option<ScalableMode>,
    pub grid_m_per_dim: Option<usize>,
}

impl TrainOverrides {
    /// Defaults with these overrides applied. Lowering `epochs` without an
    /// explicit `patience` pulls patience down with it (the default patience
    /// of 1000 would otherwise invalidate every short run); an explicit
    /// patience larger than the budget stays an error.
    pub fn resolve(&self) -> Result<TrainConfig, CliError> {
        let mut cfg = TrainConfig::default();
        if let Some(v) = self.lr0 {
            cfg.lr0 = v;
        }
        if let Some(v) = self.decay {
            cfg.decay = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.adam_beta1 {
            cfg.adam_beta1 = v;
        }
        if let Some(v) = self.adam_beta2 {
            cfg.adam_beta2 = v;
        }
        if let Some(v) = self.adam_eps {
            cfg.adam_eps = v;
        }
        if let Some(v) = self.scalable_mode {
            cfg.scalable_mode = v;
        }
        if let Some(v) = self.grid_m_per_dim {
            cfg.grid_m_per_dim = v;
        }
        match self.patience {
            Some(v) => cfg.patience = v,
            None => cfg.patience = cfg.patience.min(cfg.epochs),
        }
        cfg.validate().map_err(|e| CliError::config(format!("train config: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset CSV path(s), or registry names resolved under `$DKGP_DATA`.
    pub dataset: OneOrMany,
    /// Model name(s): gp, dkl-mlp, dkl-kan1, dkl-kan2.
    pub model: OneOrMany,
    #[serde(default)]
    pub train: TrainOverrides,
    /// Benchmark split count (each 90% train / 10% test).
    #[serde(default = "default_partitions")]
    pub partitions: usize,
    /// Output directory; the --out flag takes precedence.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_partitions() -> usize {
    5
}

pub fn load_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("config {}: {e}", path.display())))
}

pub fn resolve_out(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    flag.or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| CliError::config("no output directory: pass --out or set out_dir in the config"))
}
