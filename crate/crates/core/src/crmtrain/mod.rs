//! Certified-radius-maximisation training: loss, gradients, trainer and an
//! ℓ2 PGD attacker.

mod grad;
mod pgd;
mod train;

pub use grad::{backward, crm_loss, loss_gradient, BoundSet, ParamGrads, Slot};
pub use pgd::{attack_dataset, pgd_attack, PgdConfig, PgdOutcome};
pub use train::{train, EpochMetrics, TrainOutput, METRICS_HEADER};

use serde::{Deserialize, Serialize};

use crate::error::{LipError, Result};
use crate::linop::PowerIterConfig;
use crate::liplt::{BoundMethod, PairwiseMode};

/// Penalty `g` applied to the soft radius of correctly classified samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GKind {
    /// `max(0, target − r)`.
    Hinge { target: f64 },
    /// `exp(−r / scale)`.
    ExpDecay { scale: f64 },
}

impl GKind {
    pub fn value(&self, r: f64) -> f64 {
        match *self {
            GKind::Hinge { target } => (target - r).max(0.0),
            GKind::ExpDecay { scale } => (-r / scale).exp(),
        }
    }

    pub fn derivative(&self, r: f64) -> f64 {
        match *self {
            GKind::Hinge { target } => {
                if r < target {
                    -1.0
                } else {
                    0.0
                }
            }
            GKind::ExpDecay { scale } => -(-r / scale).exp() / scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrmConfig {
    pub lambda: f64,
    pub temperature: f64,
    pub g: GKind,
    pub lr: f64,
    /// 0 gives plain SGD.
    pub momentum: f64,
    /// Cosine decay of the learning rate to 0 over the run.
    pub cosine: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub mode: PairwiseMode,
    pub method: BoundMethod,
    /// Power iteration inside training steps.
    pub power: PowerIterConfig,
    /// Power iteration for per-epoch certification metrics.
    pub eval_power: PowerIterConfig,
    /// Recompute pairwise bounds every this many steps.
    pub refresh_every: usize,
    /// Certification budget for the per-epoch metrics.
    pub eps: f64,
    pub pgd: PgdConfig,
    pub seed: u64,
}

impl CrmConfig {
    /// Defaults for budget `eps`: hinge target `2 eps`.
    pub fn new(eps: f64) -> Self {
        CrmConfig {
            lambda: 0.0,
            temperature: crate::certify::DEFAULT_TEMPERATURE,
            g: GKind::Hinge { target: 2.0 * eps },
            lr: 0.05,
            momentum: 0.9,
            cosine: true,
            epochs: 10,
            batch_size: 64,
            mode: PairwiseMode::Direct,
            method: BoundMethod::Liplt,
            power: PowerIterConfig::training(),
            eval_power: PowerIterConfig::default(),
            refresh_every: 1,
            eps,
            pgd: PgdConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LipError::InvalidArgument(m));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        match self.g {
            GKind::Hinge { target } if self.lambda > 0.0 && !(target > 0.0) => {
                return bad(format!("hinge target must be > 0, got {target}"))
            }
            GKind::ExpDecay { scale } if self.lambda > 0.0 && !(scale > 0.0) => {
                return bad(format!("exp scale must be > 0, got {scale}"))
            }
            _ => {}
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("need lr > 0 and momentum in [0, 1), got {} and {}", self.lr, self.momentum));
        }
        if self.batch_size == 0 || self.refresh_every == 0 {
            return bad("batch_size and refresh_every must be >= 1".into());
        }
        if !(self.eps >= 0.0) {
            return bad(format!("eps must be >= 0, got {}", self.eps));
        }
        if self.method.is_refined() {
            return Err(LipError::Unsupported(format!(
                "training supports naive and liplt bounds, not {}",
                self.method
            )));
        }
        self.power.validate()?;
        self.eval_power.validate()
    }
}

/// Batch loss `surrogate_margin + λ · regularizer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Mean cross-entropy.
    pub surrogate_margin: f64,
    /// Mean of `1{γ>0} g(R_soft)`.
    pub regularizer: f64,
    pub total: f64,
    /// Soft radius per sample (0 for misclassified); empty when no bounds
    /// were needed.
    pub radii: Vec<f64>,
}
