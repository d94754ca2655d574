use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use subop::fom::DatasetSpec;
use subop::optim::TrainConfig;
use subop::ModelConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub schedule: TrainConfig,
    /// Fraction of cases assigned to training; the rest form the test split.
    pub train_fraction: f64,
    /// Rows per forward pass during evaluation and progress reporting.
    pub eval_batch_size: usize,
    /// Print a progress line every this many steps (0 disables).
    pub log_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            schedule: TrainConfig::default(),
            train_fraction: 0.9,
            eval_batch_size: 4096,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Top-level run configuration. Every section is optional; defaults use
/// the published architecture and training constants with a desk-scale grid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub fields: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.fields.validate()?;
        self.model.validate()?;
        self.train.schedule.validate()?;
        if !(self.train.train_fraction > 0.0 && self.train.train_fraction <= 1.0) {
            return Err(CliError::Input(format!(
                "train_fraction must lie in (0, 1], got {}",
                self.train.train_fraction
            )));
        }
        if self.train.eval_batch_size == 0 {
            return Err(CliError::Input("eval_batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_constants() {
        let c = RunConfig::default();
        assert_eq!(c.train.schedule.n_sub, 4096);
        assert_eq!(c.train.schedule.eta_min, 1e-16);
        assert_eq!(c.train.schedule.eta_max_outer, 1e-4);
        assert_eq!(c.train.schedule.eta_max_inner, 1e-5);
        assert_eq!(c.model.p, 250);
        assert_eq!(c.model.dropout_rate, 0.3);
        assert_eq!(c.model.leaky_slope, 0.2);
        assert_eq!(c.train.train_fraction, 0.9);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(
            r#"{"fields": {"grid": {"nx": 4, "ny": 4, "nz": 2, "nt": 3,
                 "x_range": [0, 1], "y_range": [0, 1], "z_range": [0, 1], "horizon": 1},
                 "rate_range": [1, 2]},
                "train": {"n_sub": 64, "outer_steps": 10}}"#,
        )
        .unwrap();
        assert_eq!(c.fields.fields.grid.nx, 4);
        assert_eq!(c.fields.rate_range, [1.0, 2.0]);
        assert_eq!(c.train.schedule.n_sub, 64);
        assert_eq!(c.train.schedule.outer_steps, 10);
        assert_eq!(c.train.schedule.eta_max_inner, 1e-5);
        assert_eq!(c.train.train_fraction, 0.9);
        c.validate().unwrap();
    }
}
