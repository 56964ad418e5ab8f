//! The resolved run configuration shared by every CLI stage and the
//! service. Precedence: defaults < `--config` file < environment < flags.

use std::path::{Path, PathBuf};

use mcunet_core::data::SyntheticConfig;
use mcunet_core::referral::{tau_grid, Normalization, ThresholdConfig};
use mcunet_core::uncertainty::{Metric, Reduction};
use mcunet_core::unet::{Optimizer, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TriageError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// MC-dropout passes per case.
    pub samples: usize,
    pub dropout_p: f64,
    pub tau: f64,
    pub metric: Metric,
    pub reduction: Reduction,
    pub normalization: Normalization,
    /// `start:stop:step` or a comma list.
    pub tau_grid: String,
    /// `start:stop[:step]` or a comma list of sample counts.
    pub n_grid: String,
    /// Seed repetitions for the estimator-spread part of `sweep-samples`.
    pub spread_seeds: usize,
    pub train_patches: usize,
    pub test_patches: usize,
    pub patch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub synthetic: SyntheticConfig,
    pub port: u16,
    pub store_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let threshold = ThresholdConfig::default();
        RunConfig {
            seed: 42,
            samples: 20,
            dropout_p: 0.25,
            tau: threshold.tau,
            metric: threshold.metric,
            reduction: threshold.reduction,
            normalization: threshold.normalization,
            tau_grid: "0.1:0.9:0.1".into(),
            n_grid: "1:30".into(),
            spread_seeds: 20,
            train_patches: 1000,
            test_patches: 100,
            patch_size: 48,
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 8,
            optimizer: Optimizer::adam(),
            synthetic: SyntheticConfig::default(),
            port: 8080,
            store_dir: None,
            checkpoint: None,
        }
    }
}

pub const ENV_PORT: &str = "TRIAGE_PORT";
pub const ENV_STORE_DIR: &str = "TRIAGE_STORE_DIR";
pub const ENV_CHECKPOINT: &str = "TRIAGE_CHECKPOINT";

impl RunConfig {
    /// Defaults overlaid with an optional JSON file and the environment.
    pub fn load(file: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut cfg = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| TriageError::io(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| TriageError::config(path.display().to_string(), e.to_string()))?
            }
            None => RunConfig::default(),
        };
        if let Some(port) = env(ENV_PORT) {
            cfg.port = port.parse().map_err(|_| TriageError::config(ENV_PORT, format!("{port:?} is not a port")))?;
        }
        if let Some(dir) = env(ENV_STORE_DIR) {
            cfg.store_dir = Some(dir.into());
        }
        if let Some(path) = env(ENV_CHECKPOINT) {
            cfg.checkpoint = Some(path.into());
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(TriageError::config("samples", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(TriageError::config("dropout_p", format!("{} not in [0, 1)", self.dropout_p)));
        }
        self.threshold().validate().map_err(|e| TriageError::config("tau", e.to_string()))?;
        self.taus()?;
        self.sample_grid()?;
        if self.spread_seeds == 0 {
            return Err(TriageError::config("spread_seeds", "must be at least 1"));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(4) {
            return Err(TriageError::config(
                "patch_size",
                format!("{} must be a positive multiple of 4", self.patch_size),
            ));
        }
        self.train_config().validate().map_err(|e| TriageError::config("train", e.to_string()))?;
        self.synthetic.validate().map_err(|e| TriageError::config("synthetic", e.to_string()))?;
        Ok(())
    }

    pub fn threshold(&self) -> ThresholdConfig {
        ThresholdConfig {
            metric: self.metric,
            reduction: self.reduction,
            tau: self.tau,
            normalization: self.normalization,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            dropout_p: self.dropout_p,
            seed: self.seed,
            optimizer: self.optimizer,
        }
    }

    pub fn taus(&self) -> Result<Vec<f64>> {
        parse_tau_grid(&self.tau_grid).map_err(|e| TriageError::config("tau_grid", e.to_string()))
    }

    pub fn sample_grid(&self) -> Result<Vec<usize>> {
        parse_sample_grid(&self.n_grid).map_err(|e| TriageError::config("n_grid", e))
    }
}

/// `0.1:0.9:0.1` or `0.2,0.6`.
pub fn parse_tau_grid(spec: &str) -> mcunet_core::Result<Vec<f64>> {
    let bad = || mcunet_core::Error::invalid("tau grid", format!("{spec:?} is not start:stop:step or a comma list"));
    let nums = |sep: char| -> mcunet_core::Result<Vec<f64>> {
        spec.split(sep).map(|s| s.trim().parse::<f64>().map_err(|_| bad())).collect()
    };
    if spec.contains(':') {
        match nums(':')?[..] {
            [start, stop, step] => tau_grid(start, stop, step),
            _ => Err(bad()),
        }
    } else {
        let taus = nums(',')?;
        for &t in &taus {
            ThresholdConfig::default().with_tau(t).validate()?;
        }
        Ok(taus)
    }
}

/// `1:30`, `1:30:2` or `1,5,10`; must be strictly ascending.
pub fn parse_sample_grid(spec: &str) -> std::result::Result<Vec<usize>, String> {
    let bad = || format!("{spec:?} is not start:stop[:step] or a comma list of positive integers");
    let nums = |sep: char| -> std::result::Result<Vec<usize>, String> {
        spec.split(sep).map(|s| s.trim().parse::<usize>().map_err(|_| bad())).collect()
    };
    let grid: Vec<usize> = if spec.contains(':') {
        match nums(':')?[..] {
            [a, b] if a <= b => (a..=b).collect(),
            [a, b, s] if a <= b && s > 0 => (a..=b).step_by(s).collect(),
            _ => return Err(bad()),
        }
    } else {
        nums(',')?
    };
    if grid.is_empty() || grid[0] == 0 || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(bad());
    }
    Ok(grid)
}
