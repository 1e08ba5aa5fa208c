//! Run configuration: built-in defaults, overridden by a TOML file, overridden
//! by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::DecodeConfig;
use crate::dte::ForegroundRule;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::SpotterConfig;

/// Multiplies the learning rate when the epoch loss stops improving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub enabled: bool,
    /// Relative improvement below which an epoch counts as a plateau.
    pub tolerance: f64,
    pub factor: f64,
    pub max_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            tolerance: 0.02,
            factor: 10.0,
            max_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub plateau: PlateauConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            epochs: 30,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            plateau: PlateauConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k_eval: f64,
    /// Thresholds for the proposal-count sweep.
    pub sweep: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_eval: 0.5,
            sweep: vec![0.005, 0.01, 0.02, 0.05, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub foreground_rule: ForegroundRule,
    /// Computes per-video gradients of a batch on the rayon pool.
    pub parallel: bool,
    pub model: SpotterConfig,
    pub loss: LossConfig,
    pub decode: DecodeConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
}

/// Values given on the command line; `None` leaves the file or default value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub theta: Option<f64>,
    pub k_eval: Option<f64>,
    pub epochs: Option<usize>,
    pub data_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Format {
            what: "config",
            detail: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format {
            what: "config",
            detail: e.to_string(),
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.theta {
            self.decode.theta = t;
        }
        if let Some(k) = o.k_eval {
            self.eval.k_eval = k;
        }
        if let Some(e) = o.epochs {
            self.optim.epochs = e;
        }
        if let Some(d) = &o.data_dir {
            self.data_dir = Some(d.clone());
        }
    }

    /// Defaults, then `file`, then `overrides`; the result is validated.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.decode.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0) || o.batch_size == 0 || !(o.plateau.factor >= 1.0) || !(o.plateau.max_lr >= o.lr) {
            return Err(Error::InvalidArgument(format!("optimizer settings {o:?}")));
        }
        if !(self.eval.k_eval > 0.0 && self.eval.k_eval <= 1.0) {
            return Err(Error::InvalidArgument(format!("k_eval {} not in (0, 1]", self.eval.k_eval)));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data_dir
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("no dataset directory given".into()))
    }
}
