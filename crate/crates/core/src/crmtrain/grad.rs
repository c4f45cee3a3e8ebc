use rayon::prelude::*;

use super::{CrmConfig, LossTerms};
use crate::certify::{logit_margin, soft_certified_radius};
use crate::error::{LipError, Result};
use crate::linop::{LinOp, Matrix, ParamKey, PowerIterConfig, Vector};
use crate::liplt::{pair_terms, pairwise_targets, BoundMethod, BoundTrace, PairwiseMode};
use crate::netgraph::{Affine, Dataset, ForwardTrace, ResidualChain};

/// Samples per unit of parallel work; partial sums are reduced in order so
/// results do not depend on the thread count.
const CHUNK: usize = 16;

/// Gradient (or any other tensor) shaped like one affine map of the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    /// `None` when the operator is not a trainable dense matrix.
    pub weight: Option<Matrix>,
    pub bias: Option<Vector>,
}

/// One [`Slot`] per affine map: `H_k, G_k, W_k` for every block, then the
/// final map.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub slots: Vec<Slot>,
}

fn slot_index(key: ParamKey, depth: usize) -> usize {
    match key {
        ParamKey::Skip(k) => 3 * k,
        ParamKey::Mix(k) => 3 * k + 1,
        ParamKey::Pre(k) => 3 * k + 2,
        ParamKey::Final => 3 * depth,
    }
}

fn affines(chain: &ResidualChain) -> Vec<&Affine> {
    let mut out = Vec::with_capacity(3 * chain.depth() + 1);
    for b in &chain.blocks {
        out.extend([&b.skip, &b.mix, &b.pre]);
    }
    out.push(&chain.final_map);
    out
}

fn affines_mut(chain: &mut ResidualChain) -> Vec<&mut Affine> {
    let mut out = Vec::with_capacity(3 * chain.depth() + 1);
    for b in &mut chain.blocks {
        out.extend([&mut b.skip, &mut b.mix, &mut b.pre]);
    }
    out.push(&mut chain.final_map);
    out
}

impl ParamGrads {
    pub fn zeros_like(chain: &ResidualChain) -> Self {
        let slots = affines(chain)
            .into_iter()
            .map(|a| Slot {
                weight: match &a.op {
                    LinOp::Dense(m) => Some(Matrix::zeros(m.nrows(), m.ncols())),
                    _ => None,
                },
                bias: a.bias.as_ref().map(|b| Vector::zeros(b.len())),
            })
            .collect();
        ParamGrads { slots }
    }

    pub fn get(&self, key: ParamKey) -> &Slot {
        &self.slots[slot_index(key, self.depth())]
    }

    fn depth(&self) -> usize {
        (self.slots.len() - 1) / 3
    }

    /// `weight(key) += scale · l rᵀ`.
    pub fn add_outer(&mut self, key: ParamKey, scale: f64, l: &Vector, r: &Vector) {
        let i = slot_index(key, self.depth());
        if let Some(w) = &mut self.slots[i].weight {
            w.ger(scale, l, r, 1.0);
        }
    }

    /// `self += a · other`.
    pub fn axpy(&mut self, a: f64, other: &ParamGrads) {
        for (s, o) in self.slots.iter_mut().zip(&other.slots) {
            if let (Some(w), Some(ow)) = (&mut s.weight, &o.weight) {
                w.zip_apply(ow, |x, y| *x += a * y);
            }
            if let (Some(b), Some(ob)) = (&mut s.bias, &o.bias) {
                b.axpy(a, ob, 1.0);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for s in &mut self.slots {
            if let Some(w) = &mut s.weight {
                *w *= c;
            }
            if let Some(b) = &mut s.bias {
                *b *= c;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.slots
            .iter()
            .map(|s| {
                s.weight.as_ref().map_or(0.0, |w| w.norm_squared())
                    + s.bias.as_ref().map_or(0.0, |b| b.norm_squared())
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().all(|s| {
            s.weight.as_ref().is_none_or(|w| w.iter().all(|v| v.is_finite()))
                && s.bias.as_ref().is_none_or(|b| b.iter().all(|v| v.is_finite()))
        })
    }

    /// `θ ← θ − lr · self` on every trainable weight and bias.
    pub fn apply_to(&self, chain: &mut ResidualChain, lr: f64) {
        for (a, s) in affines_mut(chain).into_iter().zip(&self.slots) {
            if let (LinOp::Dense(m), Some(g)) = (&mut a.op, &s.weight) {
                std::sync::Arc::make_mut(m).zip_apply(g, |x, y| *x -= lr * y);
            }
            if let (Some(b), Some(g)) = (&mut a.bias, &s.bias) {
                b.axpy(-lr, g, 1.0);
            }
        }
    }
}

/// Backpropagates `∂loss/∂z` through one forward pass. Adds weight gradients
/// to `grads` when given and returns `∂loss/∂x`.
pub fn backward(
    chain: &ResidualChain,
    trace: &ForwardTrace,
    grad_logits: &Vector,
    mut grads: Option<&mut ParamGrads>,
) -> Vector {
    let depth = chain.depth();
    let kind = chain.sector.kind;
    let mut acc = |key: ParamKey, g: &Vector, x: &Vector| {
        if let Some(grads) = grads.as_deref_mut() {
            let slot = &mut grads.slots[slot_index(key, depth)];
            if let Some(w) = &mut slot.weight {
                w.ger(1.0, g, x, 1.0);
            }
            if let Some(b) = &mut slot.bias {
                *b += g;
            }
        }
    };
    acc(ParamKey::Final, grad_logits, &trace.states[depth]);
    let mut g = chain.final_map.op.apply_adjoint(grad_logits);
    for k in (0..depth).rev() {
        let b = &chain.blocks[k];
        let x = &trace.states[k];
        let y = &trace.pre_acts[k];
        let a = y.map(|v| kind.apply(v));
        acc(ParamKey::Skip(k), &g, x);
        acc(ParamKey::Mix(k), &g, &a);
        let mut gy = b.mix.op.apply_adjoint(&g);
        gy.zip_apply(y, |gv, yv| *gv *= kind.slope(yv));
        acc(ParamKey::Pre(k), &gy, x);
        g = b.skip.op.apply_adjoint(&g) + b.pre.op.apply_adjoint(&gy);
    }
    g
}

/// Differentiable pairwise bounds: one trace per target final map.
#[derive(Debug, Clone)]
pub struct BoundSet {
    pub mode: PairwiseMode,
    pub num_classes: usize,
    pub traces: Vec<BoundTrace>,
}

impl BoundSet {
    pub fn compute(
        chain: &ResidualChain,
        mode: PairwiseMode,
        method: &BoundMethod,
        cfg: &PowerIterConfig,
        warm: Option<&BoundSet>,
    ) -> Result<Self> {
        if method.is_refined() {
            return Err(LipError::Unsupported(format!("{method} bounds are not differentiable here")));
        }
        let warm_vecs: Option<Vec<Vec<Vector>>> = warm
            .filter(|w| w.mode == mode && w.num_classes == chain.num_classes)
            .map(|w| w.traces.iter().map(BoundTrace::warm_vectors).collect());
        let traces = pairwise_targets(chain, mode)?
            .par_iter()
            .enumerate()
            .map(|(t, op)| {
                let w = warm_vecs.as_ref().map(|v| v[t].as_slice());
                BoundTrace::compute(chain, op, method, cfg, w)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundSet { mode, num_classes: chain.num_classes, traces })
    }

    pub fn pair(&self, i: usize, j: usize) -> f64 {
        pair_terms(self.mode, self.num_classes, i, j)
            .iter()
            .map(|&(t, c)| c * self.traces[t].value)
            .sum()
    }

    /// `L_yi` for all `i`, zero at `y`.
    pub fn row(&self, y: usize) -> Vec<f64> {
        (0..self.num_classes).map(|i| if i == y { 0.0 } else { self.pair(y, i) }).collect()
    }

    /// Routes `∂loss/∂L_yi` to weight gradients.
    fn backprop(&self, d_pair: &[f64], grads: &mut ParamGrads) {
        let k = self.num_classes;
        let mut d_target = vec![0.0; self.traces.len()];
        for y in 0..k {
            for i in 0..k {
                let d = d_pair[y * k + i];
                if i != y && d != 0.0 {
                    for (t, c) in pair_terms(self.mode, k, y, i) {
                        d_target[t] += c * d;
                    }
                }
            }
        }
        for (trace, d) in self.traces.iter().zip(d_target) {
            if d != 0.0 {
                trace.backprop(d, &mut |key, s, l, r| grads.add_outer(key, s, l, r));
            }
        }
    }
}

#[derive(Default)]
struct Partial {
    ce: f64,
    reg: f64,
    radii: Vec<f64>,
    /// `∂loss/∂L_yi`, row-major `K × K`.
    d_pair: Vec<f64>,
    grads: Option<ParamGrads>,
}

fn sample_terms(
    chain: &ResidualChain,
    x: &Vector,
    y: usize,
    bounds: Option<&BoundSet>,
    cfg: &CrmConfig,
    weight: f64,
    part: &mut Partial,
) -> Result<()> {
    let trace = chain.forward_trace(x);
    let z = &trace.logits;
    let k = z.len();
    let m = z.max();
    let exp: Vector = z.map(|v| (v - m).exp());
    let sum = exp.sum();
    let ce = m + sum.ln() - z[y];
    if !ce.is_finite() {
        return Err(LipError::NonFinite(format!("cross-entropy for label {y}")));
    }
    part.ce += ce;
    let mut gz = exp / sum;
    gz[y] -= 1.0;
    gz *= weight;

    if let Some(bounds) = bounds {
        let margin = logit_margin(z, y)?;
        if margin > 0.0 {
            let row = bounds.row(y);
            let r = soft_certified_radius(z, y, &row, cfg.temperature)?;
            part.reg += cfg.g.value(r);
            part.radii.push(r);
            let dr = cfg.lambda * weight * cfg.g.derivative(r);
            if dr != 0.0 {
                // ∂R/∂a_i = softmax(−t a)_i with a_i = (z_y − z_i) / L_yi
                let others: Vec<usize> = (0..k).filter(|&i| i != y).collect();
                let a: Vec<f64> = others.iter().map(|&i| (z[y] - z[i]) / row[i]).collect();
                let amin = a.iter().copied().fold(f64::INFINITY, f64::min);
                let w: Vec<f64> = a.iter().map(|&ai| (-cfg.temperature * (ai - amin)).exp()).collect();
                let ws: f64 = w.iter().sum();
                for (n, &i) in others.iter().enumerate() {
                    let wi = w[n] / ws;
                    gz[y] += dr * wi / row[i];
                    gz[i] -= dr * wi / row[i];
                    part.d_pair[y * k + i] -= dr * wi * a[n] / row[i];
                }
            }
        } else {
            part.radii.push(0.0);
        }
    }
    if let Some(grads) = part.grads.as_mut() {
        backward(chain, &trace, &gz, Some(grads));
    }
    Ok(())
}

/// Loss (and optionally gradients) on `data[idx]` with given bounds.
pub(crate) fn evaluate(
    chain: &ResidualChain,
    data: &Dataset,
    idx: &[usize],
    bounds: Option<&BoundSet>,
    cfg: &CrmConfig,
    want_grad: bool,
) -> Result<(LossTerms, Option<ParamGrads>)> {
    if idx.is_empty() {
        return Err(LipError::InvalidArgument("empty batch".into()));
    }
    let k = chain.num_classes;
    let weight = 1.0 / idx.len() as f64;
    let parts = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut part = Partial {
                d_pair: vec![0.0; k * k],
                grads: want_grad.then(|| ParamGrads::zeros_like(chain)),
                ..Partial::default()
            };
            for &i in chunk {
                sample_terms(chain, &data.inputs[i], data.labels[i], bounds, cfg, weight, &mut part)?;
            }
            Ok(part)
        })
        .collect::<Result<Vec<Partial>>>()?;

    let mut ce = 0.0;
    let mut reg = 0.0;
    let mut radii = Vec::with_capacity(idx.len());
    let mut d_pair = vec![0.0; k * k];
    let mut grads = want_grad.then(|| ParamGrads::zeros_like(chain));
    for p in parts {
        ce += p.ce;
        reg += p.reg;
        radii.extend(p.radii);
        for (d, pd) in d_pair.iter_mut().zip(&p.d_pair) {
            *d += pd;
        }
        if let (Some(g), Some(pg)) = (grads.as_mut(), p.grads.as_ref()) {
            g.axpy(1.0, pg);
        }
    }
    if let (Some(g), Some(b)) = (grads.as_mut(), bounds) {
        b.backprop(&d_pair, g);
    }
    let surrogate_margin = ce * weight;
    let regularizer = if bounds.is_some() { reg * weight } else { 0.0 };
    let terms = LossTerms {
        surrogate_margin,
        regularizer,
        total: surrogate_margin + cfg.lambda * regularizer,
        radii,
    };
    Ok((terms, grads))
}

pub(crate) fn check_trainable(chain: &ResidualChain, batch: &Dataset) -> Result<()> {
    if !chain.is_dense() {
        return Err(LipError::Unsupported("gradients need a dense chain (no conv operators)".into()));
    }
    if batch.input_dim() != chain.input_dim() || batch.num_classes != chain.num_classes {
        return Err(LipError::DimensionMismatch(format!(
            "batch ({} inputs, {} classes) does not match model ({} inputs, {} classes)",
            batch.input_dim(),
            batch.num_classes,
            chain.input_dim(),
            chain.num_classes
        )));
    }
    Ok(())
}

/// `mean CE + λ · mean 1{γ>0} g(R_soft)` over the batch, with fresh bounds.
pub fn crm_loss(chain: &ResidualChain, batch: &Dataset, cfg: &CrmConfig) -> Result<LossTerms> {
    cfg.validate()?;
    let bounds = BoundSet::compute(chain, cfg.mode, &cfg.method, &cfg.power, None)?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    Ok(evaluate(chain, batch, &idx, Some(&bounds), cfg, false)?.0)
}

/// Loss and its gradient with respect to every dense weight and bias.
/// Bounds are computed (cold) only when `λ > 0`.
pub fn loss_gradient(
    chain: &ResidualChain,
    batch: &Dataset,
    cfg: &CrmConfig,
) -> Result<(LossTerms, ParamGrads)> {
    cfg.validate()?;
    check_trainable(chain, batch)?;
    let bounds = if cfg.lambda > 0.0 {
        Some(BoundSet::compute(chain, cfg.mode, &cfg.method, &cfg.power, None)?)
    } else {
        None
    };
    let idx: Vec<usize> = (0..batch.len()).collect();
    let (terms, grads) = evaluate(chain, batch, &idx, bounds.as_ref(), cfg, true)?;
    Ok((terms, grads.expect("gradients requested")))
}
