//! Experiment configuration files (TOML) and the `36/255` epsilon syntax.

use std::path::{Path, PathBuf};

use certilip::data::{DataConfig, DatasetSource};
use certilip::layers::{LayerSpec, Preset};
use certilip::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// A budget written as a decimal (`0.1`) or a fraction (`36/255`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsValue {
    Number(f64),
    Text(String),
}

impl EpsValue {
    pub fn value(&self) -> Result<f64, CliError> {
        match self {
            EpsValue::Number(v) => check_eps(*v, &v.to_string()),
            EpsValue::Text(s) => parse_eps(s),
        }
    }
}

fn check_eps(v: f64, text: &str) -> Result<f64, CliError> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(CliError::argument(format!(
            "eps must be a finite value >= 0, got {text:?}"
        )))
    }
}

pub fn parse_eps(text: &str) -> Result<f64, CliError> {
    let t = text.trim();
    let bad = || {
        CliError::argument(format!(
            "cannot parse eps {t:?}; use a decimal or a fraction like 36/255"
        ))
    };
    let v = match t.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num.trim().parse().map_err(|_| bad())?;
            let den: f64 = den.trim().parse().map_err(|_| bad())?;
            if den == 0.0 {
                return Err(bad());
            }
            num / den
        }
        None => t.parse().map_err(|_| bad())?,
    };
    check_eps(v, t)
}

pub fn parse_eps_list(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(parse_eps)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub preset: Option<Preset>,
    /// Explicit layer list, used when no preset is given.
    #[serde(default)]
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub lln: bool,
    /// Fixed CPL step; the trained network cannot be certified.
    #[serde(default)]
    pub relaxed_h: Option<f64>,
}

impl ModelConfig {
    pub fn layers(&self) -> Vec<LayerSpec> {
        match &self.preset {
            Some(p) => p.layers(),
            None => self.layers.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub eps: Vec<EpsValue>,
    #[serde(default)]
    pub attack: bool,
    #[serde(default = "default_attack_iterations")]
    pub attack_iterations: usize,
    #[serde(default)]
    pub random_start: bool,
    /// Pairs for the empirical Lipschitz estimate; 0 skips it.
    #[serde(default)]
    pub lipschitz_pairs: usize,
}

fn default_attack_iterations() -> usize {
    10
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            eps: Vec::new(),
            attack: false,
            attack_iterations: default_attack_iterations(),
            random_start: false,
            lipschitz_pairs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds data generation, splitting, initialization and shuffling.
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Write `checkpoints/epoch-NNNN` every this many epochs (0: never).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
    }

    /// Reads a config file; relative dataset paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new("config.unreadable", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data.source {
            DatasetSource::Idx { images, labels, .. } => {
                fix(images);
                fix(labels);
            }
            DatasetSource::Csv { path, .. } => fix(path),
            _ => {}
        }
    }

    /// Propagates the single experiment seed into every seeded component.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
    }

    pub fn eps(&self) -> Result<Vec<f64>, CliError> {
        self.eval.eps.iter().map(EpsValue::value).collect()
    }
}
