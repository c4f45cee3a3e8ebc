
use lipcert::certify::{
    certified_accuracy, certified_radius, certify_dataset, lse_scaled, soft_certified_radius,
};
use lipcert::crmtrain::{train, CrmConfig};
use lipcert::linop::{PowerIterConfig, Vector};
use lipcert::liplt::{BoundMethod, PairwiseMode};
use lipcert::netgraph::{gen_two_moons, ActivationSector, ResidualChain};
use lipcert::rng::{stream_rng, Stream};
use proptest::prelude::*;
use rand::Rng;

fn random_case(rng: &mut impl Rng) -> (Vector, usize, Vec<f64>) {
    let k = rng.random_range(2..=10);
    let z = Vector::from_fn(k, |_, _| rng.random_range(-5.0..5.0));
    let y = rng.random_range(0..k);
    let l = (0..k).map(|i| if i == y { 0.0 } else { rng.random_range(0.1..10.0) }).collect();
    (z, y, l)
}

/// Smallest normalised gap by exhaustive scan.
fn brute_min(z: &Vector, y: usize, l: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..z.len() {
        if i != y {
            let g = (z[y] - z[i]) / l[i];
            if g < best {
                best = g;
            }
        }
    }
    best
}

#[test]
fn soft_radius_sandwich_many_triples() {
    let mut rng = stream_rng(300, Stream::Sampling);
    for n in 0..10_000 {
        let (z, y, l) = random_case(&mut rng);
        let t = [1.0, 10.0, 100.0][n % 3];
        let k = z.len();
        let hard = brute_min(&z, y, &l);
        let soft = soft_certified_radius(&z, y, &l, t).unwrap();
        assert!(hard - soft >= -1e-12, "{hard} < {soft}");
        assert!(soft + ((k - 1) as f64).ln() / t - hard >= -1e-12);
        if k == 2 {
            assert!((soft - hard).abs() <= 1e-12);
        }
        let r = certified_radius(&z, y, &l).unwrap();
        assert_eq!(r, if hard > 0.0 { hard } else { 0.0 });
    }
}

#[test]
fn lse_sandwich() {
    let mut rng = stream_rng(301, Stream::Sampling);
    for _ in 0..1000 {
        let n = rng.random_range(1..20);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for t in [1.0, 10.0, 100.0] {
            let v = lse_scaled(&x, t).unwrap();
            assert!(v >= max && v <= max + (n as f64).ln() / t + 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn radius_monotone_and_scale_covariant(seed in 0u64..100_000, c in 0.1f64..10.0, bump in 0.0f64..2.0) {
        let mut rng = stream_rng(seed, Stream::Sampling);
        let (z, y, l) = random_case(&mut rng);
        let k = z.len();
        let r = certified_radius(&z, y, &l).unwrap();
        let i = (y + 1) % k;
        let mut z2 = z.clone();
        z2[i] -= bump;
        prop_assert!(certified_radius(&z2, y, &l).unwrap() >= r);
        let mut l2 = l.clone();
        l2[i] /= 1.0 + bump;
        prop_assert!(certified_radius(&z, y, &l2).unwrap() >= r);

        let scaled: Vec<f64> = l.iter().map(|v| v * c).collect();
        let rs = certified_radius(&z, y, &scaled).unwrap();
        prop_assert!((rs - r / c).abs() <= 1e-14 * r.max(1.0) / c);
        let s = soft_certified_radius(&z, y, &l, 10.0).unwrap();
        // scaling L by c is scaling gaps by 1/c at temperature t·c
        let ss = soft_certified_radius(&z, y, &scaled, 10.0 * c).unwrap();
        prop_assert!((ss - s / c).abs() <= 1e-12 * s.abs().max(1.0));
    }
}

#[test]
fn certified_accuracy_curve_on_moons() {
    let data = gen_two_moons(400, 0.1, 5).unwrap();
    let init = ResidualChain::init_mlp(&[2, 16, 16, 2], ActivationSector::relu(), 5).unwrap();
    let mut cfg = CrmConfig::new(0.1);
    cfg.epochs = 30;
    cfg.batch_size = 32;
    let chain = train(&init, &data, None, &cfg).unwrap().chain;
    let out = certify_dataset(&chain, &data, 0.0, 10.0, PairwiseMode::Direct, &BoundMethod::Liplt, &PowerIterConfig::default()).unwrap();
    assert!(out.summary.clean_acc > 0.8);
    assert_eq!(out.summary.cert_acc, out.summary.clean_acc);
    let mut prev = 1.0;
    for i in 0..50 {
        let eps = i as f64 * 0.02;
        let acc = certified_accuracy(&out.records, eps);
        assert!(acc <= prev);
        prev = acc;
    }
    assert_eq!(certified_accuracy(&out.records, 1e9), 0.0);
    for r in &out.records {
        assert!(r.index < data.len());
        if r.margin <= 0.0 {
            assert_eq!(r.radius_lower, 0.0);
        } else {
            assert!(r.soft_radius <= r.radius_lower + 1e-12);
        }
    }
}
