use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::grad::{check_trainable, evaluate, BoundSet, ParamGrads};
use super::CrmConfig;
use crate::certify::certify_dataset;
use crate::error::{LipError, Result};
use crate::netgraph::{Dataset, ResidualChain};
use crate::rng::{stream_rng, Stream};

pub const METRICS_HEADER: &str = "epoch,loss,ce,reg,clean_acc,mean_radius,cert_acc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Batch means over the epoch.
    pub loss: f64,
    pub ce: f64,
    pub reg: f64,
    /// Certification metrics on the validation set (or the training set).
    pub clean_acc: f64,
    pub mean_radius: f64,
    pub cert_acc: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.loss, self.ce, self.reg, self.clean_acc, self.mean_radius, self.cert_acc
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub chain: ResidualChain,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainOutput {
    pub fn metrics_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for m in &self.metrics {
            out.push_str(&m.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Minibatch SGD with momentum on the CRM loss.
pub fn train(
    chain: &ResidualChain,
    train_data: &Dataset,
    val_data: Option<&Dataset>,
    cfg: &CrmConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    check_trainable(chain, train_data)?;
    if let Some(v) = val_data {
        check_trainable(chain, v)?;
    }
    let mut chain = chain.clone();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(TrainOutput { chain, metrics });
    }

    let n = train_data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as f64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(cfg.seed, Stream::Shuffle);
    let mut velocity = ParamGrads::zeros_like(&chain);
    let mut bounds: Option<BoundSet> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut ce_sum, mut reg_sum) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.lambda > 0.0 && step.is_multiple_of(cfg.refresh_every) {
                bounds = Some(BoundSet::compute(&chain, cfg.mode, &cfg.method, &cfg.power, bounds.as_ref())?);
            }
            let active = if cfg.lambda > 0.0 { bounds.as_ref() } else { None };
            let (terms, grads) = match evaluate(&chain, train_data, batch, active, cfg, true) {
                Err(LipError::NonFinite(what)) => {
                    return Err(LipError::Diverged { epoch, step, detail: format!("non-finite {what}") })
                }
                other => other?,
            };
            let grads = grads.expect("gradients requested");
            if !terms.total.is_finite() || !grads.is_finite() {
                return Err(LipError::Diverged {
                    epoch,
                    step,
                    detail: format!(
                        "loss {} (ce {}, reg {}), gradient norm {}",
                        terms.total,
                        terms.surrogate_margin,
                        terms.regularizer,
                        grads.norm()
                    ),
                });
            }
            loss_sum += terms.total;
            ce_sum += terms.surrogate_margin;
            reg_sum += terms.regularizer;

            let lr = if cfg.cosine {
                0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos())
            } else {
                cfg.lr
            };
            velocity.scale(cfg.momentum);
            velocity.axpy(1.0, &grads);
            velocity.apply_to(&mut chain, lr);
            step += 1;
        }

        let eval = val_data.unwrap_or(train_data);
        let cert = certify_dataset(&chain, eval, cfg.eps, cfg.temperature, cfg.mode, &cfg.method, &cfg.eval_power)?;
        let batches = steps_per_epoch as f64;
        metrics.push(EpochMetrics {
            epoch,
            loss: loss_sum / batches,
            ce: ce_sum / batches,
            reg: reg_sum / batches,
            clean_acc: cert.summary.clean_acc,
            mean_radius: cert.summary.mean_radius,
            cert_acc: cert.summary.cert_acc,
        });
    }
    Ok(TrainOutput { chain, metrics })
}
