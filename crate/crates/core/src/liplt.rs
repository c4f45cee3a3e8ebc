//! Lipschitz upper bounds for residual chains.
//!
//! * [`naive_bound`]: product of per-block `‖H‖ + β‖G‖‖W‖` and `‖W_L‖`.
//! * [`liplt_single`] / [`refined_single`]: loop-transformed single-block
//!   bounds, the refined one using a diagonal `T ⪰ GᵀG`.
//! * [`liplt_multi`]: the multi-block recursion
//!   `m_{k+1} = ‖W_{k+1}Ĥ_k⋯Ĥ_0‖ + (β−α)/2 Σ_j ‖W_{k+1}Ĥ_k⋯Ĥ_{j+1}G_j‖ m_j`,
//!   `m_0 = ‖W_0‖`, with `Ĥ_k = H_k + (α+β)/2 G_k W_k`.
//! * [`pairwise_lipschitz`]: bounds for the logit differences `z_i − z_j`.
//!
//! [`sampled_lower_bound`] and [`pattern_enum_bound`] are soundness oracles.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LipError, Result};
use crate::linop::{
    compose, row_diff, row_select, scale_shift, spectral_norm, spectral_norm_with_pair, LinOp,
    Matrix, ParamKey, PowerIterConfig, SingularPair, Vector,
};
use crate::netgraph::{tag, ActivationKind, ActivationSector, Affine, ResidualBlock, ResidualChain};
use crate::crmtrain::backward;
use crate::rng::{indexed_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BoundMethod {
    Naive,
    Liplt,
    RefinedSn,
    RefinedAol,
    /// Weights `q > 0`; empty means all ones.
    RefinedSll(Vec<f64>),
}

impl BoundMethod {
    pub fn is_refined(&self) -> bool {
        matches!(self, BoundMethod::RefinedSn | BoundMethod::RefinedAol | BoundMethod::RefinedSll(_))
    }
}

impl fmt::Display for BoundMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundMethod::Naive => "naive",
            BoundMethod::Liplt => "liplt",
            BoundMethod::RefinedSn => "refined:sn",
            BoundMethod::RefinedAol => "refined:aol",
            BoundMethod::RefinedSll(_) => "refined:sll",
        })
    }
}

impl FromStr for BoundMethod {
    type Err = LipError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(BoundMethod::Naive),
            "liplt" => Ok(BoundMethod::Liplt),
            "refined:sn" => Ok(BoundMethod::RefinedSn),
            "refined:aol" => Ok(BoundMethod::RefinedAol),
            "refined:sll" => Ok(BoundMethod::RefinedSll(vec![])),
            other => Err(LipError::InvalidArgument(format!("unknown bound method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairwiseMode {
    /// Bound `z_i − z_j` directly.
    Direct,
    /// `L_i + L_j` from per-class bounds.
    ClassSum,
    /// `√2 · L` from the whole-network bound.
    Sqrt2,
}

impl PairwiseMode {
    pub const ALL: [PairwiseMode; 3] = [PairwiseMode::Direct, PairwiseMode::ClassSum, PairwiseMode::Sqrt2];
}

impl fmt::Display for PairwiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairwiseMode::Direct => "direct",
            PairwiseMode::ClassSum => "class_sum",
            PairwiseMode::Sqrt2 => "sqrt2",
        })
    }
}

impl FromStr for PairwiseMode {
    type Err = LipError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(PairwiseMode::Direct),
            "class_sum" => Ok(PairwiseMode::ClassSum),
            "sqrt2" => Ok(PairwiseMode::Sqrt2),
            other => Err(LipError::InvalidArgument(format!("unknown pairwise mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    #[serde(with = "method_as_str")]
    pub method: BoundMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<PairwiseMode>,
    /// Whole-network bound.
    #[serde(rename = "L")]
    pub lipschitz: f64,
    pub num_classes: usize,
    /// `L_i`, filled in class-sum mode.
    pub per_class: Vec<f64>,
    /// Row-major `K × K`, symmetric with zero diagonal; empty for
    /// whole-network reports.
    pub pairwise: Vec<f64>,
    pub wall_time: f64,
}

mod method_as_str {
    use super::BoundMethod;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BoundMethod, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(m)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BoundMethod, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl BoundReport {
    pub fn pair(&self, i: usize, j: usize) -> f64 {
        self.pairwise[i * self.num_classes + j]
    }

    /// `L_yi` for all `i` (entry `y` is zero).
    pub fn row(&self, y: usize) -> &[f64] {
        &self.pairwise[y * self.num_classes..(y + 1) * self.num_classes]
    }

    /// Mean over unique pairs `i < j`.
    pub fn mean_pairwise(&self) -> f64 {
        let k = self.num_classes;
        let mut sum = 0.0;
        for i in 0..k {
            for j in i + 1..k {
                sum += self.pair(i, j);
            }
        }
        sum / (k * (k - 1) / 2) as f64
    }

    /// `i,j,L_ij` rows for `i < j`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,L_ij\n");
        let k = self.num_classes;
        for i in 0..k {
            for j in i + 1..k {
                out.push_str(&format!("{i},{j},{}\n", self.pair(i, j)));
            }
        }
        out
    }
}

/// Product of factors with identity factors dropped.
fn product(mut ops: Vec<LinOp>) -> Result<LinOp> {
    let n = ops[ops.len() - 1].in_dim();
    let m = ops[0].out_dim();
    ops.retain(|op| !matches!(op, LinOp::Identity(_)));
    if ops.is_empty() {
        debug_assert_eq!(n, m);
        return Ok(LinOp::Identity(n));
    }
    compose(ops)
}

/// One norm evaluated inside a bound, kept for gradient routing.
#[derive(Debug, Clone)]
pub struct NormEval {
    pub op: LinOp,
    pub value: f64,
    pub pair: Option<SingularPair>,
}

#[derive(Debug, Clone)]
enum Layout {
    /// Norms `[H_0, G_0, W_0, H_1, …, W_L]`.
    Naive { beta: f64, blocks: usize },
    /// Norm 0 is `‖W_0‖`; `slots[t-1]` lists `(first, count)` for step `t`:
    /// the `a_t` norm followed by `b_{t,0} … b_{t,t-1}`.
    Liplt { half_width: f64, slots: Vec<usize>, m: Vec<f64> },
}

/// A differentiable whole-network bound: the value plus every norm it used.
#[derive(Debug, Clone)]
pub struct BoundTrace {
    pub value: f64,
    pub norms: Vec<NormEval>,
    inflation: f64,
    layout: Layout,
}

fn eval_norms(
    ops: Vec<LinOp>,
    cfg: &PowerIterConfig,
    warm: Option<&[Vector]>,
) -> Result<Vec<NormEval>> {
    ops.into_par_iter()
        .enumerate()
        .map(|(i, op)| {
            let w = warm.and_then(|w| w.get(i));
            let (value, pair) = spectral_norm_with_pair(&op, cfg, w)?;
            Ok(NormEval { op, value, pair })
        })
        .collect()
}

impl BoundTrace {
    /// Naive or LipLT bound of `final_op ∘ blocks`.
    pub fn compute(
        chain: &ResidualChain,
        final_op: &LinOp,
        method: &BoundMethod,
        cfg: &PowerIterConfig,
        warm: Option<&[Vector]>,
    ) -> Result<Self> {
        match method {
            BoundMethod::Naive => Self::naive(chain, final_op, cfg, warm),
            BoundMethod::Liplt => Self::liplt(chain, final_op, cfg, warm),
            other => Err(LipError::Unsupported(format!(
                "{other} has no multi-block trace; use refined_single"
            ))),
        }
    }

    fn naive(
        chain: &ResidualChain,
        final_op: &LinOp,
        cfg: &PowerIterConfig,
        warm: Option<&[Vector]>,
    ) -> Result<Self> {
        let mut ops = Vec::with_capacity(3 * chain.depth() + 1);
        for (k, b) in chain.blocks.iter().enumerate() {
            let (h, g, w) = b.tagged_ops(k);
            ops.extend([h, g, w]);
        }
        ops.push(final_op.clone());
        let norms = eval_norms(ops, cfg, warm)?;
        let beta = chain.sector.beta;
        let mut value = 1.0;
        for k in 0..chain.depth() {
            let (h, g, w) = (norms[3 * k].value, norms[3 * k + 1].value, norms[3 * k + 2].value);
            value *= h + beta * g * w;
        }
        value *= norms[3 * chain.depth()].value;
        Ok(BoundTrace {
            value,
            norms,
            inflation: cfg.inflation,
            layout: Layout::Naive { beta, blocks: chain.depth() },
        })
    }

    fn liplt(
        chain: &ResidualChain,
        final_op: &LinOp,
        cfg: &PowerIterConfig,
        warm: Option<&[Vector]>,
    ) -> Result<Self> {
        let depth = chain.depth();
        let center = chain.sector.center();
        let half_width = chain.sector.half_width();
        let mut hats = Vec::with_capacity(depth);
        let mut mixes = Vec::with_capacity(depth);
        let mut pres = Vec::with_capacity(depth + 1);
        for (k, b) in chain.blocks.iter().enumerate() {
            let (h, g, w) = b.tagged_ops(k);
            hats.push(scale_shift(h, g.clone(), w.clone(), center)?);
            mixes.push(g);
            pres.push(w);
        }
        pres.push(final_op.clone());

        let mut ops = vec![pres[0].clone()];
        let mut slots = Vec::with_capacity(depth);
        for t in 1..=depth {
            slots.push(ops.len());
            // a_t = W_t Ĥ_{t-1} ⋯ Ĥ_0
            let mut factors = vec![pres[t].clone()];
            factors.extend(hats[..t].iter().rev().cloned());
            ops.push(product(factors)?);
            // b_{t,j} = W_t Ĥ_{t-1} ⋯ Ĥ_{j+1} G_j
            for j in 0..t {
                let mut factors = vec![pres[t].clone()];
                factors.extend(hats[j + 1..t].iter().rev().cloned());
                factors.push(mixes[j].clone());
                ops.push(product(factors)?);
            }
        }
        let norms = eval_norms(ops, cfg, warm)?;

        let mut m = Vec::with_capacity(depth + 1);
        m.push(norms[0].value);
        for t in 1..=depth {
            let first = slots[t - 1];
            let mut acc = 0.0;
            for j in 0..t {
                acc += half_width * norms[first + 1 + j].value * m[j];
            }
            m.push(norms[first].value + acc);
        }
        Ok(BoundTrace {
            value: m[depth],
            norms,
            inflation: cfg.inflation,
            layout: Layout::Liplt { half_width, slots, m },
        })
    }

    /// `m_0 … m_L` for LipLT traces.
    pub fn recursion(&self) -> Option<&[f64]> {
        match &self.layout {
            Layout::Liplt { m, .. } => Some(m),
            Layout::Naive { .. } => None,
        }
    }

    /// Right singular vectors of every norm, for warm starts.
    pub fn warm_vectors(&self) -> Vec<Vector> {
        self.norms
            .iter()
            .map(|n| n.pair.as_ref().map(|p| p.v.clone()).unwrap_or_else(|| Vector::zeros(0)))
            .collect()
    }

    /// `∂ value / ∂ norm_i` scaled by `upstream`.
    pub fn norm_gradients(&self, upstream: f64) -> Vec<f64> {
        let vals: Vec<f64> = self.norms.iter().map(|n| n.value).collect();
        let mut g = vec![0.0; vals.len()];
        match &self.layout {
            Layout::Naive { beta, blocks } => {
                let factors: Vec<f64> = (0..*blocks)
                    .map(|k| vals[3 * k] + beta * vals[3 * k + 1] * vals[3 * k + 2])
                    .collect();
                let fin = vals[3 * blocks];
                let prod_except = |skip: usize| {
                    factors.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, f)| f).product::<f64>()
                        * fin
                };
                for k in 0..*blocks {
                    let rest = upstream * prod_except(k);
                    g[3 * k] = rest;
                    g[3 * k + 1] = rest * beta * vals[3 * k + 2];
                    g[3 * k + 2] = rest * beta * vals[3 * k + 1];
                }
                g[3 * blocks] = upstream * factors.iter().product::<f64>();
            }
            Layout::Liplt { half_width, slots, m } => {
                let depth = slots.len();
                let mut gm = vec![0.0; depth + 1];
                gm[depth] = upstream;
                for t in (1..=depth).rev() {
                    let first = slots[t - 1];
                    g[first] += gm[t];
                    for j in 0..t {
                        g[first + 1 + j] += gm[t] * half_width * m[j];
                        gm[j] += gm[t] * half_width * vals[first + 1 + j];
                    }
                }
                g[0] += gm[0];
            }
        }
        g
    }

    /// Routes `upstream · ∂ value / ∂ θ` to tagged weights. Singular vectors
    /// are held fixed, i.e. `∂‖A‖/∂A = u vᵀ`.
    pub fn backprop(&self, upstream: f64, sink: &mut dyn FnMut(ParamKey, f64, &Vector, &Vector)) {
        let grads = self.norm_gradients(upstream);
        for (eval, g) in self.norms.iter().zip(grads) {
            if g == 0.0 {
                continue;
            }
            if let Some(pair) = &eval.pair {
                eval.op.backprop_bilinear(&pair.u, &pair.v, g * (1.0 + self.inflation), sink);
            }
        }
    }
}

fn final_op(chain: &ResidualChain) -> LinOp {
    tag(ParamKey::Final, &chain.final_map.op)
}

/// `∏_k (‖H_k‖ + β‖G_k‖‖W_k‖) · ‖W_L‖`.
pub fn naive_bound(chain: &ResidualChain, cfg: &PowerIterConfig) -> Result<f64> {
    Ok(BoundTrace::naive(chain, &final_op(chain), cfg, None)?.value)
}

/// `‖H + (α+β)/2 G W‖ + (β−α)/2 ‖G‖‖W‖`.
pub fn liplt_single(
    block: &ResidualBlock,
    sector: &ActivationSector,
    cfg: &PowerIterConfig,
) -> Result<f64> {
    let hat = scale_shift(block.skip.op.clone(), block.mix.op.clone(), block.pre.op.clone(), sector.center())?;
    let norms = eval_norms(vec![hat, block.mix.op.clone(), block.pre.op.clone()], cfg, None)?;
    let (a, g, w) = (norms[0].value, norms[1].value, norms[2].value);
    Ok(a + sector.half_width() * g * w)
}

/// Diagonal `T` with `GᵀG ⪯ T` for the AOL (`q = 1`) and SLL choices:
/// `T_ii = Σ_j |GᵀG|_ij q_j / q_i`.
pub fn diag_dominant_t(gram: &Matrix, q: Option<&[f64]>) -> Result<Vector> {
    let n = gram.nrows();
    if let Some(q) = q {
        if q.len() != n {
            return Err(LipError::InvalidArgument(format!(
                "SLL weights have length {} but T has size {n}",
                q.len()
            )));
        }
        if q.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(LipError::InvalidArgument("SLL weights q must be positive".into()));
        }
    }
    Ok(Vector::from_fn(n, |i, _| {
        let mut s = 0.0;
        for j in 0..n {
            s += match q {
                Some(q) => gram[(i, j)].abs() * (q[j] / q[i]),
                None => gram[(i, j)].abs(),
            };
        }
        s
    }))
}

/// `‖H + (α+β)/2 G W‖ + (β−α)/2 ‖WᵀTW‖^{1/2}` for a diagonal `T ⪰ GᵀG`.
pub fn refined_single(
    block: &ResidualBlock,
    sector: &ActivationSector,
    method: &BoundMethod,
    cfg: &PowerIterConfig,
) -> Result<f64> {
    let q: Option<Vec<f64>> = match method {
        BoundMethod::RefinedSn => return liplt_single(block, sector, cfg),
        BoundMethod::RefinedAol => None,
        BoundMethod::RefinedSll(q) if q.is_empty() => Some(vec![1.0; block.hidden_dim()]),
        BoundMethod::RefinedSll(q) => Some(q.clone()),
        other => {
            return Err(LipError::InvalidArgument(format!(
                "refined_single needs a refined method, got {other}"
            )))
        }
    };
    if matches!(block.mix.op, LinOp::Conv2d(_)) || matches!(block.pre.op, LinOp::Conv2d(_)) {
        return Err(LipError::Unsupported(
            "refined bounds need G materialised; conv blocks support naive/liplt only".into(),
        ));
    }
    let g = block.mix.op.to_dense();
    let gram = g.transpose() * &g;
    let t = diag_dominant_t(&gram, q.as_deref())?;
    let hat = scale_shift(block.skip.op.clone(), block.mix.op.clone(), block.pre.op.clone(), sector.center())?;
    // ‖WᵀTW‖^{1/2} = ‖T^{1/2} W‖
    let root_t = LinOp::diagonal(t.map(f64::sqrt));
    let tw = compose(vec![root_t, block.pre.op.clone()])?;
    let norms = eval_norms(vec![hat, tw], cfg, None)?;
    Ok(norms[0].value + sector.half_width() * norms[1].value)
}

/// Single-block chain with the final map folded in: `(F H, F G, W)`.
fn absorb_final(chain: &ResidualChain, final_op: &LinOp) -> Result<ResidualBlock> {
    if chain.depth() != 1 {
        return Err(LipError::Unsupported(format!(
            "refined bounds are single-block only; chain has {} blocks",
            chain.depth()
        )));
    }
    let b = &chain.blocks[0];
    Ok(ResidualBlock {
        skip: Affine::linear(product(vec![final_op.clone(), b.skip.op.clone()])?),
        mix: Affine::linear(product(vec![final_op.clone(), b.mix.op.clone()])?),
        pre: Affine::linear(b.pre.op.clone()),
    })
}

/// Bound of `final_op ∘ blocks` under any method.
pub fn network_bound(
    chain: &ResidualChain,
    final_op: &LinOp,
    method: &BoundMethod,
    cfg: &PowerIterConfig,
) -> Result<f64> {
    if method.is_refined() {
        let block = absorb_final(chain, final_op)?;
        return refined_single(&block, &chain.sector, method, cfg);
    }
    Ok(BoundTrace::compute(chain, final_op, method, cfg, None)?.value)
}

/// Whole-network LipLT bound `m_L`.
pub fn liplt_multi(chain: &ResidualChain, cfg: &PowerIterConfig) -> Result<BoundReport> {
    let start = Instant::now();
    let trace = BoundTrace::liplt(chain, &final_op(chain), cfg, None)?;
    Ok(BoundReport {
        method: BoundMethod::Liplt,
        mode: None,
        lipschitz: trace.value,
        num_classes: chain.num_classes,
        per_class: vec![],
        pairwise: vec![],
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Final maps whose bounds make up a pairwise report.
pub(crate) fn pairwise_targets(chain: &ResidualChain, mode: PairwiseMode) -> Result<Vec<LinOp>> {
    let k = chain.num_classes;
    let fin = final_op(chain);
    match mode {
        PairwiseMode::Direct => {
            let mut ops = Vec::with_capacity(k * (k - 1) / 2);
            for i in 0..k {
                for j in i + 1..k {
                    ops.push(product(vec![row_diff(k, i, j)?, fin.clone()])?);
                }
            }
            Ok(ops)
        }
        PairwiseMode::ClassSum => {
            (0..k).map(|i| product(vec![row_select(k, i)?, fin.clone()])).collect()
        }
        PairwiseMode::Sqrt2 => Ok(vec![fin]),
    }
}

/// How target bounds combine into `L_ij`: `(target, coefficient)` terms.
pub(crate) fn pair_terms(mode: PairwiseMode, k: usize, i: usize, j: usize) -> Vec<(usize, f64)> {
    let (i, j) = (i.min(j), i.max(j));
    match mode {
        PairwiseMode::Direct => {
            // index of (i, j) in row-major upper-triangle order
            let idx = i * k - i * (i + 1) / 2 + (j - i - 1);
            vec![(idx, 1.0)]
        }
        PairwiseMode::ClassSum => vec![(i, 1.0), (j, 1.0)],
        PairwiseMode::Sqrt2 => vec![(0, std::f64::consts::SQRT_2)],
    }
}

/// Fills the `K × K` matrix from target bounds.
pub(crate) fn assemble_pairwise(mode: PairwiseMode, k: usize, targets: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in i + 1..k {
            let v: f64 = pair_terms(mode, k, i, j).iter().map(|&(t, c)| c * targets[t]).sum();
            out[i * k + j] = v;
            out[j * k + i] = v;
        }
    }
    out
}

/// Pairwise bounds `L_ij` on `z_i − z_j` under the given mode.
pub fn pairwise_lipschitz(
    chain: &ResidualChain,
    mode: PairwiseMode,
    method: &BoundMethod,
    cfg: &PowerIterConfig,
) -> Result<BoundReport> {
    let k = chain.num_classes;
    if k < 2 {
        return Err(LipError::InvalidArgument("pairwise bounds need K >= 2".into()));
    }
    let start = Instant::now();
    let whole = network_bound(chain, &final_op(chain), method, cfg)?;
    let targets: Vec<f64> = match mode {
        PairwiseMode::Sqrt2 => vec![whole],
        _ => pairwise_targets(chain, mode)?
            .par_iter()
            .map(|op| network_bound(chain, op, method, cfg))
            .collect::<Result<_>>()?,
    };
    let per_class = if mode == PairwiseMode::ClassSum { targets.clone() } else { vec![] };
    Ok(BoundReport {
        method: method.clone(),
        mode: Some(mode),
        lipschitz: whole,
        num_classes: k,
        per_class,
        pairwise: assemble_pairwise(mode, k, &targets),
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Builds `h(x) = √ρ x − ((α+β)/√ρ) WᵀT φ(W x)` with `T` chosen so that
/// `W Wᵀ ⪯ 2ρ/(α+β)² T⁻¹`; such a layer is `√ρ`-Lipschitz.
pub fn make_rho_lipschitz_layer(
    w: &Matrix,
    sector: &ActivationSector,
    rho: f64,
    t_choice: &BoundMethod,
) -> Result<ResidualBlock> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(LipError::InvalidArgument(format!("rho must be > 0, got {rho}")));
    }
    let s = sector.alpha + sector.beta;
    if s == 0.0 {
        return Err(LipError::InvalidArgument("sector with alpha + beta = 0".into()));
    }
    let scale = 2.0 * rho / (s * s);
    let (n, d) = w.shape();
    // dominant(i) ⪰ W Wᵀ; T = scale · dominant⁻¹
    let dominant: Vector = match t_choice {
        BoundMethod::RefinedSn => {
            let norm = spectral_norm(&LinOp::dense(w.clone()), &PowerIterConfig::default())?;
            Vector::from_element(n, norm * norm)
        }
        BoundMethod::RefinedAol => diag_dominant_t(&(w * w.transpose()), None)?,
        BoundMethod::RefinedSll(q) => {
            let ones;
            let q = if q.is_empty() {
                ones = vec![1.0; n];
                &ones
            } else {
                q
            };
            diag_dominant_t(&(w * w.transpose()), Some(q))?
        }
        other => {
            return Err(LipError::InvalidArgument(format!(
                "T choice must be refined:sn, refined:aol or refined:sll, got {other}"
            )))
        }
    };
    let t = dominant.map(|v| if v > 0.0 { scale / v } else { 0.0 });
    let root = rho.sqrt();
    let mut wt_t = w.transpose();
    for (c, tc) in t.iter().enumerate() {
        wt_t.column_mut(c).scale_mut(-s / root * tc);
    }
    Ok(ResidualBlock {
        skip: Affine::linear(LinOp::Scaled(root, Box::new(LinOp::Identity(d)))),
        mix: Affine::linear(LinOp::dense(wt_t)),
        pre: Affine::linear(LinOp::dense(w.clone())),
    })
}

/// Largest Jacobian norm over random probes: a lower bound on the true
/// Lipschitz constant of the logits.
///
/// Even probes draw inputs uniformly from `[0, 1]^d`, odd ones from a
/// standard normal. The Jacobian is assembled row by row with one backward
/// pass per logit and its norm taken from the `K × K` Gram matrix.
pub fn sampled_lower_bound(chain: &ResidualChain, n_samples: usize, seed: u64) -> Result<f64> {
    let d = chain.input_dim();
    let k = chain.final_map.op.out_dim();
    let best = (0..n_samples.max(1))
        .into_par_iter()
        .map(|i| {
            let mut rng = indexed_rng(seed, Stream::Sampling, i as u64);
            let x = if i % 2 == 0 {
                Vector::from_fn(d, |_, _| rng.random::<f64>())
            } else {
                Vector::from_fn(d, |_, _| StandardNormal.sample(&mut rng))
            };
            let trace = chain.forward_trace(&x);
            let mut jac = Matrix::zeros(k, d);
            for r in 0..k {
                let mut e = Vector::zeros(k);
                e[r] = 1.0;
                jac.set_row(r, &backward(chain, &trace, &e, None).transpose());
            }
            let gram = &jac * jac.transpose();
            let top = gram.symmetric_eigenvalues().max().max(0.0).sqrt();
            if !top.is_finite() {
                return Err(LipError::NonFinite("sampled Jacobian".into()));
            }
            Ok(top)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(best.into_iter().fold(0.0, f64::max))
}

/// Maximum of `‖F G D W‖₂` over all `2ⁿ` diagonal 0/1 patterns `D` of a
/// single hidden ReLU layer (`H = 0`, width ≤ 12), padded by a floating-point
/// error bound.
pub fn pattern_enum_bound(chain: &ResidualChain) -> Result<f64> {
    if chain.depth() != 1 {
        return Err(LipError::Unsupported("pattern enumeration needs exactly one block".into()));
    }
    if chain.sector.kind != ActivationKind::Relu {
        return Err(LipError::Unsupported("pattern enumeration needs relu".into()));
    }
    let b = &chain.blocks[0];
    let n = b.hidden_dim();
    if n > 12 {
        return Err(LipError::InvalidArgument(format!(
            "pattern enumeration is limited to 12 hidden units, got {n}"
        )));
    }
    if !b.skip.op.is_zero() && b.skip.op.to_dense().iter().any(|&v| v != 0.0) {
        return Err(LipError::Unsupported("pattern enumeration needs H = 0".into()));
    }
    let fg = chain.final_map.op.to_dense() * b.mix.op.to_dense();
    let w = b.pre.op.to_dense();
    let mut best = 0.0f64;
    for mask in 0u32..(1 << n) {
        let mut fgd = fg.clone();
        for c in 0..n {
            if mask & (1 << c) == 0 {
                fgd.column_mut(c).fill(0.0);
            }
        }
        // σ̂ plus the rounding error of the product and the SVD, so that the
        // result stays an upper bound in floating point
        let gamma = f64::EPSILON * (n + 2 * fgd.nrows().max(w.ncols()) + 4) as f64;
        let slack = gamma * (fgd.abs() * w.abs()).norm();
        let m: DMatrix<f64> = fgd * &w;
        let sigma = m.svd(false, false).singular_values.max();
        best = best.max(sigma + slack);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::ResidualChain;
    use crate::rng::{stream_rng, Stream};

    fn cfg() -> PowerIterConfig {
        PowerIterConfig::default()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    fn scalar(v: f64) -> LinOp {
        LinOp::dense(Matrix::from_element(1, 1, v))
    }

    fn chain_of(blocks: Vec<ResidualBlock>, final_op: LinOp) -> ResidualChain {
        let input = blocks[0].in_dim();
        let classes = final_op.out_dim();
        ResidualChain::new(blocks, Affine::linear(final_op), ActivationSector::relu(), vec![input], classes.max(2))
            .unwrap()
    }

    fn diag(v: &[f64]) -> LinOp {
        LinOp::diagonal(Vector::from_vec(v.to_vec()))
    }

    #[test]
    fn naive_small_cases() {
        let identity_path = ResidualBlock {
            skip: Affine::linear(LinOp::Identity(2)),
            mix: Affine::linear(LinOp::zero(2, 2)),
            pre: Affine::linear(LinOp::dense(Matrix::identity(2, 2))),
        };
        assert_eq!(naive_bound(&chain_of(vec![identity_path], LinOp::Identity(2)), &cfg()).unwrap(), 1.0);

        let scaled_relu = ResidualBlock {
            skip: Affine::linear(LinOp::zero(2, 2)),
            mix: Affine::linear(LinOp::Identity(2)),
            pre: Affine::linear(diag(&[2.0, 1.0])),
        };
        let c = chain_of(vec![scaled_relu.clone()], LinOp::Identity(2));
        assert!(close(naive_bound(&c, &cfg()).unwrap(), 2.0, 1e-5));
        // no skip path: LT brings no gain
        assert!(close(liplt_single(&scaled_relu, &ActivationSector::relu(), &cfg()).unwrap(), 2.0, 1e-5));

        let block = ResidualBlock {
            skip: Affine::linear(scalar(1.0)),
            mix: Affine::linear(scalar(1.0)),
            pre: Affine::linear(scalar(1.0)),
        };
        let blocks = vec![block];
        let input = 1;
        let c = ResidualChain {
            blocks,
            final_map: Affine::linear(LinOp::Identity(1)),
            sector: ActivationSector::relu(),
            input_shape: vec![input],
            num_classes: 1,
        };
        assert!(close(naive_bound(&c, &cfg()).unwrap(), 2.0, 1e-5));
    }

    #[test]
    fn loop_transform_scalar() {
        // h(x) = x − relu(x)
        let block = ResidualBlock {
            skip: Affine::linear(scalar(1.0)),
            mix: Affine::linear(scalar(-1.0)),
            pre: Affine::linear(scalar(1.0)),
        };
        let lt = liplt_single(&block, &ActivationSector::relu(), &cfg()).unwrap();
        assert!(close(lt, 1.0, 1e-5), "{lt}");
        assert_eq!(refined_single(&block, &ActivationSector::relu(), &BoundMethod::RefinedSn, &cfg()).unwrap(), lt);
    }

    #[test]
    fn aol_identity_case() {
        let block = ResidualBlock {
            skip: Affine::linear(LinOp::zero(2, 2)),
            mix: Affine::linear(LinOp::dense(Matrix::identity(2, 2))),
            pre: Affine::linear(LinOp::dense(Matrix::identity(2, 2))),
        };
        let v = refined_single(&block, &ActivationSector::relu(), &BoundMethod::RefinedAol, &cfg()).unwrap();
        assert!(close(v, 1.0, 1e-5), "{v}");
        assert!(refined_single(&block, &ActivationSector::relu(), &BoundMethod::RefinedSll(vec![1.0, -1.0]), &cfg()).is_err());
        assert!(refined_single(&block, &ActivationSector::relu(), &BoundMethod::Naive, &cfg()).is_err());
    }

    #[test]
    fn sll_with_unit_weights_equals_aol() {
        let mut rng = stream_rng(8, Stream::Sampling);
        let chain = ResidualChain::random_residual(6, 6, 5, 1, 2, &mut rng).unwrap();
        let b = &chain.blocks[0];
        let s = ActivationSector::relu();
        let aol = refined_single(b, &s, &BoundMethod::RefinedAol, &cfg()).unwrap();
        let sll = refined_single(b, &s, &BoundMethod::RefinedSll(vec![1.0; 5]), &cfg()).unwrap();
        assert_eq!(aol, sll);
    }

    #[test]
    fn multi_layer_diagonal_example() {
        let block = |h: &[f64]| ResidualBlock {
            skip: Affine::linear(diag(h)),
            mix: Affine::linear(LinOp::zero(2, 2)),
            pre: Affine::linear(LinOp::Identity(2)),
        };
        let c = chain_of(vec![block(&[2.0, 0.5]), block(&[0.5, 2.0])], LinOp::Identity(2));
        let lt = liplt_multi(&c, &cfg()).unwrap().lipschitz;
        let naive = naive_bound(&c, &cfg()).unwrap();
        assert!(close(lt, 1.0, 1e-5), "{lt}");
        assert!(close(naive, 4.0, 1e-5), "{naive}");
    }

    #[test]
    fn one_block_recursion_is_single_layer_bound() {
        let mut rng = stream_rng(9, Stream::Sampling);
        let mut chain = ResidualChain::random_residual(5, 5, 7, 1, 2, &mut rng).unwrap();
        chain.final_map = Affine::linear(LinOp::Identity(5));
        chain.num_classes = 5;
        let m1 = liplt_multi(&chain, &cfg()).unwrap().lipschitz;
        let single = liplt_single(&chain.blocks[0], &chain.sector, &cfg()).unwrap();
        assert!((m1 - single).abs() <= 1e-12 * single, "{m1} vs {single}");
    }

    #[test]
    fn linear_network_pairwise_is_row_difference_norm() {
        let mut rng = stream_rng(10, Stream::Sampling);
        let a = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let block = ResidualBlock {
            skip: Affine::linear(LinOp::dense(a.clone())),
            mix: Affine::linear(LinOp::zero(4, 3)),
            pre: Affine::linear(LinOp::dense(Matrix::identity(3, 3))),
        };
        let chain = ResidualChain::new(vec![block], Affine::linear(LinOp::Identity(4)), ActivationSector::relu(), vec![3], 4).unwrap();
        let exact = PowerIterConfig { inflation: 0.0, ..cfg() };
        let rep = pairwise_lipschitz(&chain, PairwiseMode::Direct, &BoundMethod::Liplt, &exact).unwrap();
        for i in 0..4 {
            assert_eq!(rep.pair(i, i), 0.0);
            for j in 0..4 {
                assert_eq!(rep.pair(i, j), rep.pair(j, i));
                if i != j {
                    let d = (a.row(i) - a.row(j)).norm();
                    assert!(close(rep.pair(i, j), d, 1e-10), "{} vs {d}", rep.pair(i, j));
                }
            }
        }
    }

    #[test]
    fn pairwise_modes_consistent() {
        let mut rng = stream_rng(11, Stream::Sampling);
        let chain = ResidualChain::random_residual(6, 8, 8, 2, 4, &mut rng).unwrap();
        for method in [BoundMethod::Naive, BoundMethod::Liplt] {
            let direct = pairwise_lipschitz(&chain, PairwiseMode::Direct, &method, &cfg()).unwrap();
            let sum = pairwise_lipschitz(&chain, PairwiseMode::ClassSum, &method, &cfg()).unwrap();
            let sq = pairwise_lipschitz(&chain, PairwiseMode::Sqrt2, &method, &cfg()).unwrap();
            assert_eq!(sum.per_class.len(), 4);
            assert!(close(sum.pair(1, 3), sum.per_class[1] + sum.per_class[3], 1e-15));
            assert!(close(sq.pair(0, 2), std::f64::consts::SQRT_2 * sq.lipschitz, 1e-15));
            assert!(direct.mean_pairwise() > 0.0);
        }
        let refined = pairwise_lipschitz(&chain, PairwiseMode::Direct, &BoundMethod::RefinedAol, &cfg());
        assert!(matches!(refined, Err(LipError::Unsupported(_))));
    }

    #[test]
    fn pattern_enum_small_cases() {
        let block = ResidualBlock {
            skip: Affine::linear(LinOp::zero(2, 2)),
            mix: Affine::linear(LinOp::dense(Matrix::identity(2, 2))),
            pre: Affine::linear(LinOp::dense(Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 1.0])))),
        };
        let c = chain_of(vec![block], LinOp::Identity(2));
        assert!(close(pattern_enum_bound(&c).unwrap(), 2.0, 1e-12));

        let block = ResidualBlock {
            skip: Affine::linear(LinOp::zero(1, 2)),
            mix: Affine::linear(LinOp::dense(Matrix::from_row_slice(1, 2, &[1.0, 1.0]))),
            pre: Affine::linear(LinOp::dense(Matrix::identity(2, 2))),
        };
        let c = ResidualChain {
            blocks: vec![block],
            final_map: Affine::linear(LinOp::Identity(1)),
            sector: ActivationSector::relu(),
            input_shape: vec![2],
            num_classes: 1,
        };
        assert!(close(pattern_enum_bound(&c).unwrap(), 2f64.sqrt(), 1e-12));
    }

    #[test]
    fn rho_layer_identity_weight() {
        let w = Matrix::identity(2, 2);
        let blk = make_rho_lipschitz_layer(&w, &ActivationSector::relu(), 1.0, &BoundMethod::RefinedSn).unwrap();
        // G = −(α+β)/√ρ · WᵀT with T = 2·I (up to the norm inflation)
        let g = blk.mix.op.to_dense();
        assert!((g[(0, 0)] + 2.0).abs() < 1e-5 && g[(0, 1)] == 0.0);
        assert!(make_rho_lipschitz_layer(&w, &ActivationSector::relu(), 0.0, &BoundMethod::RefinedSn).is_err());
        assert!(make_rho_lipschitz_layer(&w, &ActivationSector::relu(), 1.0, &BoundMethod::Liplt).is_err());
    }

    #[test]
    fn report_json_shape() {
        let rep = BoundReport {
            method: BoundMethod::RefinedSll(vec![]),
            mode: Some(PairwiseMode::ClassSum),
            lipschitz: 2.0,
            num_classes: 2,
            per_class: vec![1.0, 1.5],
            pairwise: vec![0.0, 2.5, 2.5, 0.0],
            wall_time: 0.0,
        };
        let v: serde_json::Value = serde_json::to_value(&rep).unwrap();
        assert_eq!(v["method"], "refined:sll");
        assert_eq!(v["mode"], "class_sum");
        assert_eq!(v["L"], 2.0);
        assert_eq!(rep.to_csv(), "i,j,L_ij\n0,1,2.5\n");
    }
}
