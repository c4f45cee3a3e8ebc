//! Network and dataset data model.
//!
//! A network is a chain of residual blocks `x ↦ H x + G φ(W x)` followed by a
//! final linear map. Plain feed-forward layers are blocks with `H = 0` and
//! `G = I`. Biases are carried for forward passes only; no Lipschitz
//! computation looks at them.

mod dataset;
mod format;

pub use dataset::{gen_two_moons, load_idx, write_idx, Dataset};
pub use format::{parse_model, save_model, MANIFEST_FILE, WEIGHTS_FILE};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LipError, Result};
use crate::linop::{LinOp, Matrix, ParamKey, Vector};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Identity,
    Tanh,
    Sigmoid,
}

impl ActivationKind {
    /// Tightest slope interval of the scalar activation.
    pub fn natural_sector(self) -> (f64, f64) {
        match self {
            ActivationKind::Relu => (0.0, 1.0),
            ActivationKind::Identity => (1.0, 1.0),
            ActivationKind::Tanh => (0.0, 1.0),
            ActivationKind::Sigmoid => (0.0, 0.25),
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Identity => x,
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative, taking 0 at the ReLU kink.
    pub fn slope(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Identity => 1.0,
            ActivationKind::Tanh => 1.0 - x.tanh().powi(2),
            ActivationKind::Sigmoid => {
                let s = self.apply(x);
                s * (1.0 - s)
            }
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Identity => "identity",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for ActivationKind {
    type Err = LipError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ActivationKind::Relu),
            "identity" => Ok(ActivationKind::Identity),
            "tanh" => Ok(ActivationKind::Tanh),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            other => Err(LipError::InvalidModel(format!("unknown activation kind '{other}'"))),
        }
    }
}

/// Slope bounds `α ≤ (φ(x) − φ(x'))/(x − x') ≤ β` of the activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationSector {
    pub alpha: f64,
    pub beta: f64,
    pub kind: ActivationKind,
}

impl ActivationSector {
    pub fn new(kind: ActivationKind, alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha <= beta && beta.is_finite()) {
            return Err(LipError::InvalidModel(format!(
                "activation sector must satisfy 0 <= alpha <= beta < inf, got [{alpha}, {beta}]"
            )));
        }
        let (lo, hi) = kind.natural_sector();
        let ok = match kind {
            ActivationKind::Relu | ActivationKind::Identity => alpha == lo && beta == hi,
            ActivationKind::Tanh | ActivationKind::Sigmoid => alpha <= lo && beta >= hi,
        };
        if !ok {
            return Err(LipError::InvalidModel(format!(
                "sector [{alpha}, {beta}] does not match {kind} (slopes in [{lo}, {hi}])"
            )));
        }
        Ok(ActivationSector { alpha, beta, kind })
    }

    pub fn of(kind: ActivationKind) -> Self {
        let (alpha, beta) = kind.natural_sector();
        ActivationSector { alpha, beta, kind }
    }

    pub fn relu() -> Self {
        Self::of(ActivationKind::Relu)
    }

    /// `(α + β)/2`, the slope moved into the skip path by loop transformation.
    pub fn center(&self) -> f64 {
        0.5 * (self.alpha + self.beta)
    }

    /// `(β − α)/2`, the Lipschitz constant of the transformed nonlinearity.
    pub fn half_width(&self) -> f64 {
        0.5 * (self.beta - self.alpha)
    }
}

/// A linear operator plus an optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub op: LinOp,
    pub bias: Option<Vector>,
}

impl Affine {
    pub fn linear(op: LinOp) -> Self {
        Affine { op, bias: None }
    }

    pub fn with_bias(op: LinOp, bias: Vector) -> Self {
        Affine { op, bias: Some(bias) }
    }

    pub fn apply(&self, x: &Vector) -> Vector {
        let mut y = self.op.apply(x);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    fn validate(&self, what: &str) -> Result<()> {
        if let Some(b) = &self.bias {
            if b.len() != self.op.out_dim() {
                return Err(LipError::InvalidModel(format!(
                    "{what}: bias has length {} but operator has {} outputs",
                    b.len(),
                    self.op.out_dim()
                )));
            }
        }
        Ok(())
    }
}

/// `x ↦ H x + G φ(W x)` with `skip = H`, `mix = G`, `pre = W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub skip: Affine,
    pub mix: Affine,
    pub pre: Affine,
}

impl ResidualBlock {
    pub fn new(skip: Affine, mix: Affine, pre: Affine) -> Result<Self> {
        let b = ResidualBlock { skip, mix, pre };
        b.validate(0)?;
        Ok(b)
    }

    /// Plain layer `x ↦ φ(W x + b)`.
    pub fn dense(weight: Matrix, bias: Option<Vector>) -> Self {
        let (rows, cols) = weight.shape();
        ResidualBlock {
            skip: Affine::linear(LinOp::zero(rows, cols)),
            mix: Affine::linear(LinOp::Identity(rows)),
            pre: Affine { op: LinOp::dense(weight), bias },
        }
    }

    pub fn in_dim(&self) -> usize {
        self.pre.op.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.mix.op.out_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.pre.op.out_dim()
    }

    fn validate(&self, k: usize) -> Result<()> {
        let (h, g, w) = (&self.skip.op, &self.mix.op, &self.pre.op);
        if w.out_dim() != g.in_dim() || h.in_dim() != w.in_dim() || h.out_dim() != g.out_dim() {
            return Err(LipError::InvalidModel(format!(
                "block {k}: shapes do not compose (H {}x{}, G {}x{}, W {}x{})",
                h.out_dim(),
                h.in_dim(),
                g.out_dim(),
                g.in_dim(),
                w.out_dim(),
                w.in_dim()
            )));
        }
        self.skip.validate(&format!("block {k} H"))?;
        self.mix.validate(&format!("block {k} G"))?;
        self.pre.validate(&format!("block {k} W"))
    }

    pub fn forward(&self, x: &Vector, kind: ActivationKind) -> Vector {
        let y = self.pre.apply(x).map(|v| kind.apply(v));
        self.skip.apply(x) + self.mix.apply(&y)
    }

    /// The block's operators tagged with their parameter keys for block `k`.
    pub(crate) fn tagged_ops(&self, k: usize) -> (LinOp, LinOp, LinOp) {
        (
            tag(ParamKey::Skip(k), &self.skip.op),
            tag(ParamKey::Mix(k), &self.mix.op),
            tag(ParamKey::Pre(k), &self.pre.op),
        )
    }
}

/// Wraps trainable (dense) leaves; fixed operators pass through untouched.
pub(crate) fn tag(key: ParamKey, op: &LinOp) -> LinOp {
    match op {
        LinOp::Dense(_) => LinOp::Tagged(key, Box::new(op.clone())),
        _ => op.clone(),
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `x_0 … x_L` (block inputs, then the final map's input).
    pub states: Vec<Vector>,
    /// Pre-activations `y_k = W_k x_k + b`.
    pub pre_acts: Vec<Vector>,
    pub logits: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualChain {
    pub blocks: Vec<ResidualBlock>,
    /// `W_L`; identity by default.
    pub final_map: Affine,
    pub sector: ActivationSector,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl ResidualChain {
    pub fn new(
        blocks: Vec<ResidualBlock>,
        final_map: Affine,
        sector: ActivationSector,
        input_shape: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let chain = ResidualChain { blocks, final_map, sector, input_shape, num_classes };
        chain.validate()?;
        Ok(chain)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(LipError::InvalidModel("chain must have >= 1 block".into()));
        }
        if self.num_classes < 2 {
            return Err(LipError::InvalidModel("num_classes must be >= 2".into()));
        }
        let input_dim: usize = self.input_shape.iter().product();
        if input_dim != self.blocks[0].in_dim() {
            return Err(LipError::InvalidModel(format!(
                "input shape {:?} has {input_dim} values but block 0 expects {}",
                self.input_shape,
                self.blocks[0].in_dim()
            )));
        }
        for (k, b) in self.blocks.iter().enumerate() {
            b.validate(k)?;
            if k > 0 && self.blocks[k - 1].out_dim() != b.in_dim() {
                return Err(LipError::InvalidModel(format!(
                    "block {} outputs {} values but block {k} expects {}",
                    k - 1,
                    self.blocks[k - 1].out_dim(),
                    b.in_dim()
                )));
            }
        }
        let last = self.blocks.last().unwrap().out_dim();
        if self.final_map.op.in_dim() != last {
            return Err(LipError::InvalidModel(format!(
                "final map expects {} inputs but the last block outputs {last}",
                self.final_map.op.in_dim()
            )));
        }
        if self.final_map.op.out_dim() != self.num_classes {
            return Err(LipError::InvalidModel(format!(
                "final map produces {} logits for {} classes",
                self.final_map.op.out_dim(),
                self.num_classes
            )));
        }
        self.final_map.validate("final map")
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].in_dim()
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Logits `z(x)`.
    pub fn forward(&self, x: &Vector) -> Vector {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h, self.sector.kind);
        }
        self.final_map.apply(&h)
    }

    pub fn forward_trace(&self, x: &Vector) -> ForwardTrace {
        let kind = self.sector.kind;
        let mut states = Vec::with_capacity(self.blocks.len() + 1);
        let mut pre_acts = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &self.blocks {
            let y = b.pre.apply(&h);
            let a = y.map(|v| kind.apply(v));
            let next = b.skip.apply(&h) + b.mix.apply(&a);
            states.push(h);
            pre_acts.push(y);
            h = next;
        }
        let logits = self.final_map.apply(&h);
        states.push(h);
        ForwardTrace { states, pre_acts, logits }
    }

    /// Jacobian of the logits at `x` as a matrix-free operator.
    pub fn jacobian_at(&self, x: &Vector) -> LinOp {
        let trace = self.forward_trace(x);
        let kind = self.sector.kind;
        let mut factors = vec![self.final_map.op.clone()];
        for (b, y) in self.blocks.iter().zip(&trace.pre_acts).rev() {
            let slopes = LinOp::diagonal(y.map(|v| kind.slope(v)));
            let act = LinOp::Composition(vec![b.mix.op.clone(), slopes, b.pre.op.clone()]);
            factors.push(LinOp::Sum(vec![b.skip.op.clone(), act]));
        }
        LinOp::Composition(factors)
    }

    /// Index of the largest logit (first on ties).
    pub fn predict(&self, x: &Vector) -> usize {
        argmax(&self.forward(x))
    }

    /// Whether every block and the final map are dense, identity or zero.
    pub fn is_dense(&self) -> bool {
        let ok = |op: &LinOp| {
            matches!(op, LinOp::Dense(_) | LinOp::Identity(_) | LinOp::Zero { .. })
        };
        self.blocks.iter().all(|b| ok(&b.skip.op) && ok(&b.mix.op) && ok(&b.pre.op))
            && ok(&self.final_map.op)
    }

    /// Plain MLP from `(weight, bias)` layers; the last layer is the final map.
    pub fn mlp(layers: Vec<(Matrix, Vector)>, sector: ActivationSector) -> Result<Self> {
        if layers.len() < 2 {
            return Err(LipError::InvalidModel(
                "an MLP needs at least one hidden layer and an output layer".into(),
            ));
        }
        let input_dim = layers[0].0.ncols();
        let mut layers = layers;
        let (wf, bf) = layers.pop().unwrap();
        let num_classes = wf.nrows();
        let blocks = layers.into_iter().map(|(w, b)| ResidualBlock::dense(w, Some(b))).collect();
        let final_map = Affine::with_bias(LinOp::dense(wf), bf);
        Self::new(blocks, final_map, sector, vec![input_dim], num_classes)
    }

    /// He-initialised MLP with widths `dims = [input, hidden…, classes]`.
    pub fn init_mlp(dims: &[usize], sector: ActivationSector, seed: u64) -> Result<Self> {
        if dims.len() < 3 || dims.contains(&0) {
            return Err(LipError::InvalidArgument(format!(
                "MLP widths must be positive with at least one hidden layer, got {dims:?}"
            )));
        }
        let mut rng = stream_rng(seed, Stream::Init);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let gain = if i + 2 == dims.len() { 1.0 } else { 2.0 };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).unwrap();
                let m = Matrix::from_fn(fan_out, fan_in, |_, _| normal.sample(&mut rng));
                (m, Vector::zeros(fan_out))
            })
            .collect();
        Self::mlp(layers, sector)
    }

    /// Random residual chain with dense `H`, `G`, `W` of the given width, for
    /// tests and benches.
    pub fn random_residual(
        input: usize,
        width: usize,
        hidden: usize,
        depth: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut dense = |r: usize, c: usize, scale: f64| {
            let normal = Normal::new(0.0, scale / (c as f64).sqrt()).unwrap();
            LinOp::dense(Matrix::from_fn(r, c, |_, _| normal.sample(rng)))
        };
        let mut blocks = Vec::with_capacity(depth);
        let mut n = input;
        for _ in 0..depth {
            blocks.push(ResidualBlock {
                skip: Affine::linear(dense(width, n, 1.0)),
                mix: Affine::linear(dense(width, hidden, 1.0)),
                pre: Affine::linear(dense(hidden, n, 1.0)),
            });
            n = width;
        }
        let final_map = Affine::linear(dense(classes, n, 1.0));
        Self::new(blocks, final_map, ActivationSector::relu(), vec![input], classes)
    }
}

pub fn argmax(z: &Vector) -> usize {
    let mut best = 0;
    for i in 1..z.len() {
        if z[i] > z[best] {
            best = i;
        }
    }
    best
}
