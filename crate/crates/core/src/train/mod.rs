//! Adam, the warm-up/decay learning-rate schedule and the training loop.

mod adam;
mod check;
mod run;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, OptimState};
pub use check::check_model_gradients;
pub use run::{train, train_with, MetricsRow, TrainOutcome, METRICS_HEADER};

use crate::error::{Error, Result};
use crate::losses::LossConfig;

/// How often the common units advance during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnitUpdate {
    /// Once per batch from batch-mean gates and attentions.
    PerBatch,
    /// Once per pair, in batch order; later pairs see the advanced units.
    PerPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_low: f64,
    pub lr_high: f64,
    pub warmup: usize,
    /// Hinge margin γ.
    pub gamma: f64,
    /// Contrastive temperature τ.
    pub tau: f64,
    /// Optimize the contrastive term; when off it is only reported.
    pub contrastive: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub unit_update: UnitUpdate,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr_low: 1e-5,
            lr_high: 1e-4,
            warmup: 10,
            gamma: 0.2,
            tau: 0.07,
            contrastive: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 7,
            unit_update: UnitUpdate::PerBatch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_low > 0.0 && self.lr_low <= self.lr_high && self.lr_high.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lr_low <= lr_high, got {} and {}",
                self.lr_low, self.lr_high
            )));
        }
        if self.epochs > 0 && self.warmup >= self.epochs {
            return Err(Error::Config(format!(
                "warmup {} must be shorter than {} epochs",
                self.warmup, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps >= 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps must be >= 0".into()));
        }
        self.loss().validate()
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            gamma: self.gamma,
            contrastive: self.contrastive,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Linear warm-up from `lr_low` to `lr_high` over `[0, warmup]`, then linear
/// decay back to `lr_low` at `epochs`. `epoch` may be fractional.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.epochs as f64;
    if !(0.0..=total).contains(&epoch) {
        return Err(Error::Validation(format!("epoch {epoch} outside [0, {total}]")));
    }
    let (lo, hi, w) = (cfg.lr_low, cfg.lr_high, cfg.warmup as f64);
    // blends hit both endpoints exactly
    let blend = |a: f64, b: f64, s: f64| a * (1.0 - s) + b * s;
    if epoch <= w && w > 0.0 {
        Ok(blend(lo, hi, epoch / w))
    } else if total > w {
        Ok(blend(hi, lo, (epoch - w) / (total - w)))
    } else {
        Ok(hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert!((lr_at(0.0, &cfg).unwrap() - 1e-5).abs() < 1e-20);
        assert!((lr_at(10.0, &cfg).unwrap() - 1e-4).abs() < 1e-20);
        assert!((lr_at(30.0, &cfg).unwrap() - 1e-5).abs() < 1e-20);
        assert!((lr_at(5.0, &cfg).unwrap() - 5.5e-5).abs() < 1e-18);
        assert!(lr_at(-0.1, &cfg).is_err());
        assert!(lr_at(30.5, &cfg).is_err());
    }

    #[test]
    fn no_warmup_decays_from_high() {
        let cfg = TrainConfig {
            warmup: 0,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0.0, &cfg).unwrap(), 1e-4);
        assert!((lr_at(30.0, &cfg).unwrap() - 1e-5).abs() < 1e-20);
    }

    #[test]
    fn config_checks() {
        TrainConfig::default().validate().unwrap();
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        }
        .validate()
        .unwrap();
        for bad in [
            TrainConfig {
                lr_low: 1e-3,
                ..TrainConfig::default()
            },
            TrainConfig {
                warmup: 30,
                ..TrainConfig::default()
            },
            TrainConfig {
                tau: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
