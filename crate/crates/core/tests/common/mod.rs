#![allow(dead_code)]

use gmlab_core::moments::{DiscreteMarginal, FiniteSupportDistribution};
use gmlab_core::regress::DesignMatrix;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

pub fn normal_vector<R: Rng + ?Sized>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// Gaussian entries; full column rank with probability one.
pub fn random_design<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> DesignMatrix {
    DesignMatrix::new(normal_matrix(rng, n, k)).expect("gaussian design has full rank")
}

pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let b = normal_matrix(rng, n, n);
    &b * b.transpose() + DMatrix::identity(n, n) * 0.5
}

/// Mean-zero marginal with `atoms` random atoms.
pub fn random_marginal<R: Rng + ?Sized>(rng: &mut R, atoms: usize) -> DiscreteMarginal {
    let raw: Vec<f64> = (0..atoms).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
    let values: Vec<f64> = (0..atoms).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mean: f64 = values.iter().zip(&probs).map(|(v, p)| v * p).sum();
    DiscreteMarginal::new(values.iter().map(|v| v - mean).collect(), probs).unwrap()
}

/// Mean-zero law on `m > n` random points; covariance is positive definite
/// with probability one.
pub fn random_joint_law<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    m: usize,
) -> FiniteSupportDistribution {
    let raw = DVector::from_fn(m, |_, _| rng.random_range(0.1..1.0));
    let weights = &raw / raw.sum();
    let points = normal_matrix(rng, n, m);
    let mean = &points * &weights;
    let centred = DMatrix::from_fn(n, m, |i, j| points[(i, j)] - mean[i]);
    FiniteSupportDistribution::new(centred, weights).unwrap()
}

/// Brute-force `E f(e)` over a product of marginals, enumerating index
/// tuples directly.
pub fn product_expectation(
    marginals: &[DiscreteMarginal],
    f: impl Fn(&DVector<f64>) -> f64,
) -> f64 {
    let n = marginals.len();
    let sizes: Vec<usize> = marginals.iter().map(|m| m.values().len()).collect();
    let mut idx = vec![0usize; n];
    let mut total = 0.0;
    loop {
        let e = DVector::from_fn(n, |j, _| marginals[j].values()[idx[j]]);
        let w: f64 = (0..n).map(|j| marginals[j].probs()[idx[j]]).product();
        total += w * f(&e);
        let mut pos = 0;
        loop {
            if pos == n {
                return total;
            }
            idx[pos] += 1;
            if idx[pos] < sizes[pos] {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// Brute-force `E f(e)` over the columns of a joint law.
pub fn joint_expectation(
    dist: &FiniteSupportDistribution,
    f: impl Fn(&DVector<f64>) -> f64,
) -> f64 {
    (0..dist.len())
        .map(|i| dist.weights()[i] * f(&dist.point(i)))
        .sum()
}

pub fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
