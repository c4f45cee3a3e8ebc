use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grad::backward;
use crate::linop::Vector;
use crate::netgraph::{argmax, Dataset, ResidualChain};
use crate::rng::{indexed_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub steps: usize,
    /// Defaults to `2.5 · eps / steps`.
    pub step_size: Option<f64>,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig { steps: 50, step_size: None, restarts: 1, seed: 0 }
    }
}

impl PgdConfig {
    pub fn evaluation() -> Self {
        PgdConfig { restarts: 10, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgdOutcome {
    pub success: bool,
    /// First misclassifying iterate.
    pub adversarial: Option<Vector>,
    /// `‖x_adv − x‖₂`; 0 when `x` is already misclassified.
    pub distance: f64,
    pub restart: usize,
    pub step: usize,
}

impl PgdOutcome {
    fn failed() -> Self {
        PgdOutcome { success: false, adversarial: None, distance: f64::INFINITY, restart: 0, step: 0 }
    }
}

fn ce_input_grad(chain: &ResidualChain, x: &Vector, y: usize) -> (usize, Vector) {
    let trace = chain.forward_trace(x);
    let z = &trace.logits;
    let pred = argmax(z);
    let m = z.max();
    let mut gz = z.map(|v| (v - m).exp());
    gz /= gz.sum();
    gz[y] -= 1.0;
    (pred, backward(chain, &trace, &gz, None))
}

fn random_in_ball(n: usize, eps: f64, rng: &mut impl Rng) -> Vector {
    let d = Vector::from_fn(n, |_, _| StandardNormal.sample(rng));
    let radius = eps * rng.random::<f64>().powf(1.0 / n as f64);
    let norm = d.norm();
    if norm > 0.0 {
        d * (radius / norm)
    } else {
        d
    }
}

/// ℓ2 PGD ascent on the cross-entropy within the `eps` ball around `x`.
///
/// Restart 0 starts at `x`; later restarts start at a uniform point in the
/// ball. Returns at the first iterate whose prediction differs from `y`.
pub fn pgd_attack(chain: &ResidualChain, x: &Vector, y: usize, eps: f64, cfg: &PgdConfig) -> PgdOutcome {
    if chain.predict(x) != y {
        return PgdOutcome { success: true, adversarial: Some(x.clone()), distance: 0.0, restart: 0, step: 0 };
    }
    if !(eps > 0.0) || cfg.steps == 0 {
        return PgdOutcome::failed();
    }
    let alpha = cfg.step_size.unwrap_or(2.5 * eps / cfg.steps as f64);
    for restart in 0..cfg.restarts.max(1) {
        let mut delta = if restart == 0 {
            Vector::zeros(x.len())
        } else {
            let mut rng = indexed_rng(cfg.seed, Stream::Attack, restart as u64);
            random_in_ball(x.len(), eps, &mut rng)
        };
        for step in 0..=cfg.steps {
            let cand = x + &delta;
            let (pred, g) = ce_input_grad(chain, &cand, y);
            if pred != y {
                return PgdOutcome {
                    success: true,
                    distance: delta.norm(),
                    adversarial: Some(cand),
                    restart,
                    step,
                };
            }
            let gn = g.norm();
            if step == cfg.steps || gn == 0.0 || !gn.is_finite() {
                break;
            }
            delta.axpy(alpha / gn, &g, 1.0);
            let dn = delta.norm();
            if dn > eps {
                delta *= eps / dn;
            }
        }
    }
    PgdOutcome::failed()
}

/// Attacks every sample; restart streams are offset by sample index.
pub fn attack_dataset(chain: &ResidualChain, data: &Dataset, eps: f64, cfg: &PgdConfig) -> Vec<PgdOutcome> {
    data.inputs
        .par_iter()
        .zip(data.labels.par_iter())
        .enumerate()
        .map(|(i, (x, &y))| {
            let c = PgdConfig { seed: cfg.seed.wrapping_add((i as u64) << 20), ..*cfg };
            pgd_attack(chain, x, y, eps, &c)
        })
        .collect()
}
