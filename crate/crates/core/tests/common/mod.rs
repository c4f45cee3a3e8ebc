#![allow(dead_code)]

use lipcert::linop::{LinOp, Matrix, Vector};
use lipcert::netgraph::{ActivationSector, Affine, ResidualBlock, ResidualChain};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn svd_norm(m: &Matrix) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

pub fn gaussian(r: usize, c: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(r, c, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v * scale
    })
}

pub fn gaussian_vec(n: usize, rng: &mut impl Rng) -> Vector {
    Vector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Dense `(H, G, W)` of a block.
pub fn dense_parts(b: &ResidualBlock) -> (Matrix, Matrix, Matrix) {
    (b.skip.op.to_dense(), b.mix.op.to_dense(), b.pre.op.to_dense())
}

/// Random chain with dense `H`, `G`, `W`; `skip = false` gives a plain MLP
/// (`H = 0`, `G = I`).
pub fn random_chain(
    rng: &mut impl Rng,
    input: usize,
    width: usize,
    hidden: usize,
    depth: usize,
    classes: usize,
    skip: bool,
) -> ResidualChain {
    let mut blocks = Vec::with_capacity(depth);
    let mut n = input;
    for _ in 0..depth {
        let b = if skip {
            ResidualBlock {
                skip: Affine::linear(LinOp::dense(gaussian(width, n, 1.0 / (n as f64).sqrt(), rng))),
                mix: Affine::linear(LinOp::dense(gaussian(width, hidden, 1.0 / (hidden as f64).sqrt(), rng))),
                pre: Affine::linear(LinOp::dense(gaussian(hidden, n, 1.0 / (n as f64).sqrt(), rng))),
            }
        } else {
            ResidualBlock::dense(gaussian(hidden, n, (2.0 / n as f64).sqrt(), rng), None)
        };
        n = b.out_dim();
        blocks.push(b);
    }
    let f = gaussian(classes, n, 1.0 / (n as f64).sqrt(), rng);
    ResidualChain::new(blocks, Affine::linear(LinOp::dense(f)), ActivationSector::relu(), vec![input], classes)
        .unwrap()
}
