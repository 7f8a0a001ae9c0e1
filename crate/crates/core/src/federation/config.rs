use serde::{Deserialize, Serialize};

use crate::aggregation::{DistanceMetric, FusionStrategy};
use crate::error::{Error, Result};
use crate::losses::{AttentionVariant, CalibrationSettings, Discrepancy, DEFAULT_LABEL_SMOOTHING};

/// Schedule, optimizer and ablation switches for one federated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub acquisition_epochs: usize,
    pub rounds: usize,
    pub calibration_epochs_per_round: usize,
    pub lambda: f64,
    pub label_smoothing: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,

    pub fusion: FusionStrategy,
    pub metric: DistanceMetric,
    pub alignment: bool,
    pub same_layer_only: bool,
    pub attention: AttentionVariant,
    pub smoothing: bool,
    pub retraining_ce: bool,
    pub discrepancy: Discrepancy,
    pub attention_grad: bool,

    /// Re-snapshot the frozen local model from the calibrated model after
    /// every round instead of keeping the post-acquisition snapshot.
    pub refresh_local_each_round: bool,
    /// Train clients of a round on the rayon pool; results are identical to
    /// sequential execution.
    pub parallel_clients: bool,
    /// Evaluate the fused model on every source test split each round.
    pub eval_sources: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            acquisition_epochs: 30,
            rounds: 40,
            calibration_epochs_per_round: 5,
            lambda: 0.6,
            label_smoothing: DEFAULT_LABEL_SMOOTHING,
            learning_rate: 0.01,
            momentum: 0.5,
            batch_size: 64,
            seed: 0,
            fusion: FusionStrategy::Divergence,
            metric: DistanceMetric::L2,
            alignment: true,
            same_layer_only: false,
            attention: AttentionVariant::Full,
            smoothing: true,
            retraining_ce: true,
            discrepancy: Discrepancy::default(),
            attention_grad: false,
            refresh_local_each_round: false,
            parallel_clients: false,
            eval_sources: true,
        }
    }
}

impl TrainingConfig {
    /// Defaults with the calibration epochs used outside Rotated MNIST.
    pub fn for_natural_images() -> Self {
        TrainingConfig {
            calibration_epochs_per_round: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if let Discrepancy::Mmd(k) = &self.discrepancy {
            k.validate()?;
        }
        Ok(())
    }

    /// Smoothing strength applied during local acquisition.
    pub fn acquisition_smoothing(&self) -> f64 {
        if self.smoothing {
            self.label_smoothing
        } else {
            0.0
        }
    }

    pub fn calibration_settings(&self) -> CalibrationSettings {
        CalibrationSettings {
            lambda: self.lambda,
            discrepancy: self.discrepancy.clone(),
            attention: self.attention,
            same_layer_only: self.same_layer_only,
            alignment: self.alignment,
            retraining_ce: self.retraining_ce,
            attention_grad: self.attention_grad,
        }
    }
}
