use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Settings of the alternating pruning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Weight of the ℓ1 penalty on all channel weights.
    pub lambda: f64,
    /// Step size of the pruner-only (even) epochs.
    pub lr_pruner: f64,
    /// Step size of the joint (odd) epochs.
    pub lr_joint: f64,
    pub epochs: usize,
    pub sigmoid_scale_initial: f64,
    pub sigmoid_scale_final: f64,
    /// First epoch run at `sigmoid_scale_final`.
    pub scale_switch_epoch: usize,
    pub threshold: f64,
    pub min_filters_per_layer: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Initial bias of every head, so weights start near `sigmoid(bias)`.
    pub head_bias_init: f64,
    /// Head weights are drawn from `[-r, r]`.
    pub head_init_range: f64,
    /// Training batches averaged into the final mask.
    pub calibration_batches: usize,
    /// Records drawn per epoch; `None` uses the whole training set.
    pub samples_per_epoch: Option<usize>,
    pub augment: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            lambda: 0.002,
            lr_pruner: 0.01,
            lr_joint: 0.01,
            epochs: 40,
            sigmoid_scale_initial: 1.0,
            sigmoid_scale_final: 30.0,
            scale_switch_epoch: 10,
            threshold: 0.5,
            min_filters_per_layer: 1,
            batch_size: 64,
            momentum: 0.9,
            seed: 0,
            head_bias_init: 3.0,
            head_init_range: 1e-3,
            calibration_batches: 10,
            samples_per_epoch: None,
            augment: false,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a finite non-negative number, got {}", self.lambda));
        }
        for (name, lr) in [("lr_pruner", self.lr_pruner), ("lr_joint", self.lr_joint)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if !(self.sigmoid_scale_initial > 0.0) {
            return bad(format!(
                "sigmoid_scale_initial must be positive, got {}",
                self.sigmoid_scale_initial
            ));
        }
        if !(self.sigmoid_scale_final >= self.sigmoid_scale_initial) {
            return bad(format!(
                "sigmoid_scale_final {} is below sigmoid_scale_initial {}",
                self.sigmoid_scale_final, self.sigmoid_scale_initial
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.calibration_batches == 0 {
            return bad("calibration_batches must be positive".into());
        }
        if self.samples_per_epoch == Some(0) {
            return bad("samples_per_epoch must be positive".into());
        }
        Ok(())
    }

    /// Sigmoid scale used during `epoch` (0-based): a step change.
    pub fn scale_at(&self, epoch: usize) -> f64 {
        if epoch < self.scale_switch_epoch {
            self.sigmoid_scale_initial
        } else {
            self.sigmoid_scale_final
        }
    }
}

/// Settings of plain classification training (pretraining and finetuning).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    pub samples_per_epoch: Option<usize>,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            lr: 0.01,
            batch_size: 64,
            momentum: 0.9,
            seed: 0,
            samples_per_epoch: None,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.samples_per_epoch == Some(0) {
            return Err(Error::Config("samples_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PruneConfig::default().validate().unwrap();
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn invariants_are_enforced() {
        let base = PruneConfig::default();
        let cases = [
            PruneConfig { lambda: -0.1, ..base.clone() },
            PruneConfig { lr_pruner: 0.0, ..base.clone() },
            PruneConfig { lr_joint: -1.0, ..base.clone() },
            PruneConfig { threshold: 0.0, ..base.clone() },
            PruneConfig { threshold: 1.0, ..base.clone() },
            PruneConfig { sigmoid_scale_final: 0.5, ..base.clone() },
            PruneConfig { batch_size: 0, ..base.clone() },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn scale_steps_at_switch() {
        let c = PruneConfig {
            scale_switch_epoch: 4,
            ..Default::default()
        };
        assert_eq!(c.scale_at(3), 1.0);
        assert_eq!(c.scale_at(4), 30.0);
        assert_eq!(c.scale_at(100), 30.0);
    }

    #[test]
    fn partial_toml_style_json_fills_defaults() {
        let c: PruneConfig = serde_json::from_str(r#"{"lambda": 0.005}"#).unwrap();
        assert_eq!(c.lambda, 0.005);
        assert_eq!(c.sigmoid_scale_final, 30.0);
        assert!(serde_json::from_str::<PruneConfig>(r#"{"lamda": 1}"#).is_err());
    }
}
