//! Matrix-free linear operators and spectral norms by power iteration.
//!
//! Every bound in the crate reduces to spectral norms of products such as
//! `W_{k+1} Ĥ_k ⋯ Ĥ_{j+1} G_j`. Those products are never materialised: a
//! [`LinOp`] is a small expression tree that knows how to apply itself and
//! its transpose to a vector, and [`power_iteration`] only needs those two
//! actions.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LipError, Result};
use crate::rng::{stream_rng, Stream};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Which trainable weight of a chain an operator leaf stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    Skip(usize),
    Mix(usize),
    Pre(usize),
    Final,
}

/// 2-D cross-correlation with zero padding over a `(channel, row, col)`
/// flattened input.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    /// `(out_ch, in_ch, kh, kw)` order.
    pub kernel: Vec<f64>,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
        (in_h, in_w): (usize, usize),
        kernel: Vec<f64>,
    ) -> Result<Self> {
        if stride == 0 || kh == 0 || kw == 0 || in_ch == 0 || out_ch == 0 {
            return Err(LipError::InvalidArgument(
                "conv2d sizes and stride must be positive".into(),
            ));
        }
        if kernel.len() != out_ch * in_ch * kh * kw {
            return Err(LipError::DimensionMismatch(format!(
                "conv2d kernel has {} values, expected {}",
                kernel.len(),
                out_ch * in_ch * kh * kw
            )));
        }
        if in_h + 2 * pad < kh || in_w + 2 * pad < kw {
            return Err(LipError::DimensionMismatch(
                "conv2d kernel larger than padded input".into(),
            ));
        }
        Ok(Conv2d { in_ch, out_ch, kh, kw, stride, pad, in_h, in_w, kernel })
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn in_dim(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    pub fn out_dim(&self) -> usize {
        self.out_ch * self.out_h() * self.out_w()
    }

    #[inline]
    fn k(&self, o: usize, c: usize, a: usize, b: usize) -> f64 {
        self.kernel[((o * self.in_ch + c) * self.kh + a) * self.kw + b]
    }

    /// Input pixel read by output `(oy, ox)` at kernel tap `(a, b)`.
    #[inline]
    fn tap(&self, oy: usize, ox: usize, a: usize, b: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + a).checked_sub(self.pad)?;
        let ix = (ox * self.stride + b).checked_sub(self.pad)?;
        (iy < self.in_h && ix < self.in_w).then_some((iy, ix))
    }

    fn forward(&self, x: &Vector) -> Vector {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut out = Vector::zeros(self.out_dim());
        for o in 0..self.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..self.in_ch {
                        for a in 0..self.kh {
                            for b in 0..self.kw {
                                if let Some((iy, ix)) = self.tap(oy, ox, a, b) {
                                    acc += self.k(o, c, a, b)
                                        * x[(c * self.in_h + iy) * self.in_w + ix];
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn adjoint(&self, y: &Vector) -> Vector {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut out = Vector::zeros(self.in_dim());
        for o in 0..self.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = y[(o * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..self.in_ch {
                        for a in 0..self.kh {
                            for b in 0..self.kw {
                                if let Some((iy, ix)) = self.tap(oy, ox, a, b) {
                                    out[(c * self.in_h + iy) * self.in_w + ix] +=
                                        self.k(o, c, a, b) * g;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// A linear map with forward and adjoint actions.
///
/// `Composition(ops)` applies right to left, so `Composition(vec![b, a])` is
/// `b ∘ a`. Leaves hold their weights behind `Arc`, so cloning an operator
/// tree never copies a matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum LinOp {
    Dense(Arc<Matrix>),
    Conv2d(Arc<Conv2d>),
    Identity(usize),
    Zero { rows: usize, cols: usize },
    Diagonal(Arc<Vector>),
    Scaled(f64, Box<LinOp>),
    Sum(Vec<LinOp>),
    Composition(Vec<LinOp>),
    /// The `1 × k` row `(e_i − e_j)ᵀ`.
    RowDiff { k: usize, i: usize, j: usize },
    /// Marks a leaf as a trainable weight for gradient routing.
    Tagged(ParamKey, Box<LinOp>),
}

impl LinOp {
    pub fn dense(m: Matrix) -> Self {
        LinOp::Dense(Arc::new(m))
    }

    pub fn diagonal(d: Vector) -> Self {
        LinOp::Diagonal(Arc::new(d))
    }

    pub fn zero(rows: usize, cols: usize) -> Self {
        LinOp::Zero { rows, cols }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            LinOp::Dense(m) => m.nrows(),
            LinOp::Conv2d(c) => c.out_dim(),
            LinOp::Identity(n) => *n,
            LinOp::Zero { rows, .. } => *rows,
            LinOp::Diagonal(d) => d.len(),
            LinOp::Scaled(_, a) | LinOp::Tagged(_, a) => a.out_dim(),
            LinOp::Sum(ops) => ops[0].out_dim(),
            LinOp::Composition(ops) => ops[0].out_dim(),
            LinOp::RowDiff { .. } => 1,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            LinOp::Dense(m) => m.ncols(),
            LinOp::Conv2d(c) => c.in_dim(),
            LinOp::Identity(n) => *n,
            LinOp::Zero { cols, .. } => *cols,
            LinOp::Diagonal(d) => d.len(),
            LinOp::Scaled(_, a) | LinOp::Tagged(_, a) => a.in_dim(),
            LinOp::Sum(ops) => ops[0].in_dim(),
            LinOp::Composition(ops) => ops[ops.len() - 1].in_dim(),
            LinOp::RowDiff { k, .. } => *k,
        }
    }

    pub fn apply(&self, x: &Vector) -> Vector {
        debug_assert_eq!(x.len(), self.in_dim());
        match self {
            LinOp::Dense(m) => &**m * x,
            LinOp::Conv2d(c) => c.forward(x),
            LinOp::Identity(_) => x.clone(),
            LinOp::Zero { rows, .. } => Vector::zeros(*rows),
            LinOp::Diagonal(d) => d.component_mul(x),
            LinOp::Scaled(c, a) => a.apply(x) * *c,
            LinOp::Sum(ops) => {
                let mut acc = ops[0].apply(x);
                for op in &ops[1..] {
                    acc += op.apply(x);
                }
                acc
            }
            LinOp::Composition(ops) => {
                let mut v = ops[ops.len() - 1].apply(x);
                for op in ops[..ops.len() - 1].iter().rev() {
                    v = op.apply(&v);
                }
                v
            }
            LinOp::RowDiff { i, j, .. } => Vector::from_element(1, x[*i] - x[*j]),
            LinOp::Tagged(_, a) => a.apply(x),
        }
    }

    pub fn apply_adjoint(&self, y: &Vector) -> Vector {
        debug_assert_eq!(y.len(), self.out_dim());
        match self {
            LinOp::Dense(m) => m.tr_mul(y),
            LinOp::Conv2d(c) => c.adjoint(y),
            LinOp::Identity(_) => y.clone(),
            LinOp::Zero { cols, .. } => Vector::zeros(*cols),
            LinOp::Diagonal(d) => d.component_mul(y),
            LinOp::Scaled(c, a) => a.apply_adjoint(y) * *c,
            LinOp::Sum(ops) => {
                let mut acc = ops[0].apply_adjoint(y);
                for op in &ops[1..] {
                    acc += op.apply_adjoint(y);
                }
                acc
            }
            LinOp::Composition(ops) => {
                let mut v = ops[0].apply_adjoint(y);
                for op in &ops[1..] {
                    v = op.apply_adjoint(&v);
                }
                v
            }
            LinOp::RowDiff { k, i, j } => {
                let mut v = Vector::zeros(*k);
                v[*i] = y[0];
                v[*j] = -y[0];
                v
            }
            LinOp::Tagged(_, a) => a.apply_adjoint(y),
        }
    }

    /// Explicit matrix of the operator, built column by column.
    pub fn to_dense(&self) -> Matrix {
        match self {
            LinOp::Dense(m) => (**m).clone(),
            LinOp::Tagged(_, a) => a.to_dense(),
            _ => {
                let n = self.in_dim();
                let mut out = Matrix::zeros(self.out_dim(), n);
                let mut e = Vector::zeros(n);
                for c in 0..n {
                    e[c] = 1.0;
                    out.set_column(c, &self.apply(&e));
                    e[c] = 0.0;
                }
                out
            }
        }
    }

    /// Spectral norm when it is known without iterating.
    fn exact_norm(&self) -> Option<f64> {
        match self {
            LinOp::Identity(_) => Some(1.0),
            LinOp::Zero { .. } => Some(0.0),
            LinOp::Scaled(c, a) => a.exact_norm().map(|n| c.abs() * n),
            LinOp::Tagged(_, a) => a.exact_norm(),
            _ => None,
        }
    }

    /// Whether the operator is structurally zero.
    pub fn is_zero(&self) -> bool {
        match self {
            LinOp::Zero { .. } => true,
            LinOp::Scaled(c, a) => *c == 0.0 || a.is_zero(),
            LinOp::Tagged(_, a) => a.is_zero(),
            LinOp::Sum(ops) => ops.iter().all(LinOp::is_zero),
            LinOp::Composition(ops) => ops.iter().any(LinOp::is_zero),
            _ => false,
        }
    }

    /// Routes the gradient of the bilinear form `scale · leftᵀ A right` to the
    /// tagged leaves of `A`: each leaf `P` receives `scale' · l rᵀ`, with `l`
    /// and `r` the vectors reaching `P` from either side.
    pub fn backprop_bilinear(
        &self,
        left: &Vector,
        right: &Vector,
        scale: f64,
        sink: &mut dyn FnMut(ParamKey, f64, &Vector, &Vector),
    ) {
        match self {
            LinOp::Tagged(key, _) => sink(*key, scale, left, right),
            LinOp::Scaled(c, a) => a.backprop_bilinear(left, right, scale * c, sink),
            LinOp::Sum(ops) => {
                for op in ops {
                    op.backprop_bilinear(left, right, scale, sink);
                }
            }
            LinOp::Composition(ops) => {
                // inputs[i] is what ops[i] consumes.
                let n = ops.len();
                let mut inputs = vec![right.clone(); n];
                for i in (0..n - 1).rev() {
                    inputs[i] = ops[i + 1].apply(&inputs[i + 1]);
                }
                let mut l = left.clone();
                for (i, op) in ops.iter().enumerate() {
                    op.backprop_bilinear(&l, &inputs[i], scale, sink);
                    if i + 1 < n {
                        l = op.apply_adjoint(&l);
                    }
                }
            }
            _ => {}
        }
    }
}

/// `ops[0] ∘ ops[1] ∘ … ∘ ops[n-1]`, checked for matching dimensions.
pub fn compose(ops: Vec<LinOp>) -> Result<LinOp> {
    if ops.is_empty() {
        return Err(LipError::InvalidArgument("cannot compose an empty list".into()));
    }
    for (i, pair) in ops.windows(2).enumerate() {
        if pair[0].in_dim() != pair[1].out_dim() {
            return Err(LipError::DimensionMismatch(format!(
                "composition factor {} expects {} inputs but factor {} produces {}",
                i,
                pair[0].in_dim(),
                i + 1,
                pair[1].out_dim()
            )));
        }
    }
    if ops.len() == 1 {
        return Ok(ops.into_iter().next().unwrap());
    }
    Ok(LinOp::Composition(ops))
}

/// `H + c · G W`, the loop-transformed skip path of a residual block.
pub fn scale_shift(skip: LinOp, mix: LinOp, pre: LinOp, c: f64) -> Result<LinOp> {
    let gw = compose(vec![mix, pre])?;
    if skip.out_dim() != gw.out_dim() || skip.in_dim() != gw.in_dim() {
        return Err(LipError::DimensionMismatch(format!(
            "skip path is {}x{} but mix∘pre is {}x{}",
            skip.out_dim(),
            skip.in_dim(),
            gw.out_dim(),
            gw.in_dim()
        )));
    }
    Ok(LinOp::Sum(vec![skip, LinOp::Scaled(c, Box::new(gw))]))
}

/// The row `(e_i − e_j)ᵀ` over `k` classes.
pub fn row_diff(k: usize, i: usize, j: usize) -> Result<LinOp> {
    if i >= k || j >= k {
        return Err(LipError::InvalidArgument(format!(
            "class index out of range: ({i}, {j}) with {k} classes"
        )));
    }
    if i == j {
        return Err(LipError::InvalidArgument("row_diff needs i != j".into()));
    }
    Ok(LinOp::RowDiff { k, i, j })
}

/// The row `e_iᵀ` over `k` classes.
pub fn row_select(k: usize, i: usize) -> Result<LinOp> {
    if i >= k {
        return Err(LipError::InvalidArgument(format!("class {i} out of range for {k} classes")));
    }
    let mut m = Matrix::zeros(1, k);
    m[(0, i)] = 1.0;
    Ok(LinOp::dense(m))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerIterConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
    /// Multiplicative safety margin μ: reported norms are `σ̂ · (1 + μ)`.
    pub inflation: f64,
}

impl Default for PowerIterConfig {
    fn default() -> Self {
        PowerIterConfig { max_iters: 500, rel_tol: 1e-12, seed: 0, inflation: 1e-6 }
    }
}

impl PowerIterConfig {
    /// Short warm-started runs used inside training steps.
    pub fn training() -> Self {
        PowerIterConfig { max_iters: 10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(LipError::InvalidArgument("max_iters must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(LipError::InvalidArgument("rel_tol must be > 0".into()));
        }
        if !(self.inflation >= 0.0) || !self.inflation.is_finite() {
            return Err(LipError::InvalidArgument("inflation must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Converged top singular triple `A v = σ u`.
#[derive(Debug, Clone)]
pub struct SingularPair {
    /// Uninflated estimate `‖A v‖`; never exceeds the true σ_max.
    pub sigma: f64,
    pub u: Vector,
    pub v: Vector,
    pub iters: usize,
    pub converged: bool,
    /// Top Ritz estimate of `σ` per iteration (non-decreasing).
    pub trace: Vec<f64>,
}

fn random_unit(n: usize, seed: u64) -> Vector {
    let mut rng = stream_rng(seed, Stream::PowerIteration);
    loop {
        let v = Vector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let norm = v.norm();
        if norm > 0.0 {
            return v / norm;
        }
    }
}

/// Largest eigenvalue of the symmetric tridiagonal matrix with diagonal `a`
/// and off-diagonal `b`, by Sturm-sequence bisection.
fn tridiag_top_eigenvalue(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        let r = if i > 0 { b[i - 1].abs() } else { 0.0 } + if i + 1 < n { b[i].abs() } else { 0.0 };
        lo = lo.min(a[i] - r);
        hi = hi.max(a[i] + r);
    }
    let tiny = f64::MIN_POSITIVE.sqrt();
    // number of eigenvalues below x
    let below = |x: f64| {
        let mut count = 0;
        let mut d = 1.0;
        for i in 0..n {
            let off = if i > 0 { b[i - 1] * b[i - 1] / d } else { 0.0 };
            d = a[i] - x - off;
            if d == 0.0 {
                d = -tiny;
            }
            if d < 0.0 {
                count += 1;
            }
        }
        count
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if below(mid) == n {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Solves `(T − θ I) x = rhs` for tridiagonal `T` with partial pivoting;
/// zero pivots are nudged so that near-singular shifts still give a
/// (large) solution.
fn tridiag_shifted_solve(a: &[f64], b: &[f64], theta: f64, mut rhs: Vec<f64>) -> Vec<f64> {
    let n = a.len();
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let nudge = scale * f64::EPSILON;
    let mut d: Vec<f64> = a.iter().map(|v| v - theta).collect();
    let mut du = b.to_vec();
    let dl = b.to_vec();
    let mut du2 = vec![0.0; n.saturating_sub(2)];
    for i in 0..n.saturating_sub(1) {
        if d[i].abs() >= dl[i].abs() {
            if d[i] == 0.0 {
                d[i] = nudge;
            }
            let fact = dl[i] / d[i];
            d[i + 1] -= fact * du[i];
            rhs[i + 1] -= fact * rhs[i];
        } else {
            let fact = d[i] / dl[i];
            d[i] = dl[i];
            let temp = d[i + 1];
            d[i + 1] = du[i] - fact * temp;
            if i + 2 < n {
                du2[i] = du[i + 1];
                du[i + 1] = -fact * du2[i];
            }
            du[i] = temp;
            let t = rhs[i];
            rhs[i] = rhs[i + 1];
            rhs[i + 1] = t - fact * rhs[i + 1];
        }
    }
    if d[n - 1] == 0.0 {
        d[n - 1] = nudge;
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut v = rhs[i];
        if i + 1 < n {
            v -= du[i] * x[i + 1];
        }
        if i + 2 < n {
            v -= du2[i] * x[i + 2];
        }
        x[i] = v / d[i];
    }
    x
}

/// Unit eigenvector of the tridiagonal matrix for eigenvalue `theta`.
fn tridiag_eigenvector(a: &[f64], b: &[f64], theta: f64) -> Vec<f64> {
    let n = a.len();
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    for _ in 0..3 {
        x = tridiag_shifted_solve(a, b, theta, x);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            break;
        }
        x.iter_mut().for_each(|v| *v /= norm);
    }
    x
}

/// Power iteration on `AᵀA` with Rayleigh–Ritz extraction.
///
/// The iterates `(AᵀA)ᵏ v₀` are kept as an orthonormal basis (Lanczos with
/// full reorthogonalisation) and the estimate is the top Ritz value over
/// their span. This never exceeds `σ_max²` and converges far faster than
/// the last iterate alone when the top singular values are clustered, as
/// they are for convolutions.
///
/// Starts from `warm` when given (and usable), otherwise from a seeded
/// uniform-on-sphere vector. Stops when the estimate changes by less than
/// `rel_tol` relative and the eigen-residual of `AᵀA` is below `√rel_tol`.
pub fn power_iteration(
    op: &LinOp,
    cfg: &PowerIterConfig,
    warm: Option<&Vector>,
) -> Result<SingularPair> {
    cfg.validate()?;
    let n = op.in_dim();
    let m = op.out_dim();
    if n == 0 || m == 0 || op.is_zero() {
        return Ok(SingularPair {
            sigma: 0.0,
            u: Vector::zeros(m),
            v: Vector::zeros(n),
            iters: 0,
            converged: true,
            trace: vec![],
        });
    }
    let warm = warm.filter(|w| w.len() == n && w.iter().all(|x| x.is_finite()) && w.norm() > 0.0);
    let start = match warm {
        Some(w) => w / w.norm(),
        None => random_unit(n, cfg.seed),
    };

    let mut basis = vec![start];
    let (mut alphas, mut betas) = (Vec::new(), Vec::new());
    let mut trace = Vec::new();
    let mut converged = false;
    let mut prev = 0.0;
    let mut ritz = None;
    while alphas.len() < cfg.max_iters {
        let j = alphas.len();
        let q = &basis[j];
        let aq = op.apply(q);
        if !aq.iter().all(|v| v.is_finite()) {
            return Err(LipError::NonFinite("power iteration (forward)".into()));
        }
        let mut w = op.apply_adjoint(&aq);
        if !w.iter().all(|v| v.is_finite()) {
            return Err(LipError::NonFinite("power iteration (adjoint)".into()));
        }
        let alpha = q.dot(&w);
        alphas.push(alpha);
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&w);
                w.axpy(-c, b, 1.0);
            }
        }
        let beta = w.norm();
        let theta = tridiag_top_eigenvalue(&alphas, &betas).max(0.0);
        let sigma = theta.sqrt();
        trace.push(sigma);
        if theta == 0.0 {
            if j == 0 && warm.is_some() {
                // warm vector in the null space: start over cold
                return power_iteration(op, cfg, None);
            }
            break;
        }
        let exhausted = beta <= 1e-14 * theta || basis.len() == n;
        let change = (sigma - prev).abs() / sigma;
        prev = sigma;
        if exhausted || change <= cfg.rel_tol {
            let s = tridiag_eigenvector(&alphas, &betas, theta);
            let residual = beta * s[j].abs() / theta;
            let done = exhausted || residual <= cfg.rel_tol.sqrt();
            ritz = Some(s);
            if done {
                converged = true;
                break;
            }
        }
        betas.push(beta);
        basis.push(w / beta);
    }
    basis.truncate(alphas.len());
    let s = match ritz {
        Some(s) if s.len() == alphas.len() => s,
        _ => {
            let theta = tridiag_top_eigenvalue(&alphas, &betas[..alphas.len() - 1]);
            tridiag_eigenvector(&alphas, &betas[..alphas.len() - 1], theta)
        }
    };
    let mut v = Vector::zeros(n);
    for (c, b) in s.iter().zip(&basis) {
        v.axpy(*c, b, 1.0);
    }
    let vn = v.norm();
    if !(vn > 0.0) || !vn.is_finite() {
        v = basis[0].clone();
    } else {
        v /= vn;
    }
    // Report the triple for the final vector so that σ = uᵀ A v exactly.
    let av = op.apply(&v);
    let sigma = av.norm();
    if !sigma.is_finite() {
        return Err(LipError::NonFinite("power iteration".into()));
    }
    let u = if sigma > 0.0 { &av / sigma } else { Vector::zeros(m) };
    Ok(SingularPair { sigma, u, v, iters: alphas.len(), converged, trace })
}

/// Inflated spectral norm `σ̂ (1 + μ)`.
pub fn spectral_norm(op: &LinOp, cfg: &PowerIterConfig) -> Result<f64> {
    if let Some(n) = op.exact_norm() {
        return Ok(n);
    }
    Ok(power_iteration(op, cfg, None)?.sigma * (1.0 + cfg.inflation))
}

/// Like [`spectral_norm`] but returns the singular pair for gradient use and
/// accepts a warm start.
pub fn spectral_norm_with_pair(
    op: &LinOp,
    cfg: &PowerIterConfig,
    warm: Option<&Vector>,
) -> Result<(f64, Option<SingularPair>)> {
    if let Some(n) = op.exact_norm() {
        return Ok((n, None));
    }
    let pair = power_iteration(op, cfg, warm)?;
    Ok((pair.sigma * (1.0 + cfg.inflation), Some(pair)))
}
