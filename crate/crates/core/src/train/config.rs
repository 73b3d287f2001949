use serde::{Deserialize, Serialize};

use super::{AdamConfig, TrainError};

/// Validation quantity that drives early stopping and best-model selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMetric {
    #[default]
    Cer,
    CtcLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs without strict improvement tolerated before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub eval_metric: EvalMetric,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 2,
            patience: 50,
            max_epochs: 1000,
            seed: 0,
            eval_metric: EvalMetric::Cer,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &'static str, reason: String| Err(TrainError::Config { field, reason });
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad("learning_rate", format!("{} is not a finite non-negative rate", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience", "must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be at least 1".into());
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps.is_nan() || eps <= 0.0 {
            return bad("adam", format!("betas must lie in [0, 1) and eps be positive, got {:?}", self.adam));
        }
        Ok(())
    }

    /// Digest of everything that shapes the trajectory, except `max_epochs`
    /// so a finished run can be extended.
    pub fn trajectory_digest(&self) -> String {
        let Self { learning_rate, batch_size, patience, seed, eval_metric, adam, .. } = self;
        crate::digest_hex(&format!(
            "{:016x}|{batch_size}|{patience}|{seed}|{eval_metric:?}|{:016x}|{:016x}|{:016x}",
            learning_rate.to_bits(),
            adam.beta1.to_bits(),
            adam.beta2.to_bits(),
            adam.eps.to_bits()
        ))
    }
}
