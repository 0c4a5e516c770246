//! Seeded random streams and Monte Carlo confirmation of analytic variances.
//!
//! Every random draw in the crate comes from a ChaCha8 stream addressed by
//! `(seed, stream index)`. ChaCha is counter based, so stream `i` does not
//! depend on how many other streams were consumed or in which order; Monte
//! Carlo replication `r` always uses stream `r`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::koopmann::QuadraticEstimator;
use crate::moments::{DiscreteMarginal, ErrorLaw};
use crate::regress::check_len;
use crate::{Error, Result};

/// Default seed for searches, probes and simulations.
pub const DEFAULT_SEED: u64 = 0x6D61726B;

/// Absolute allowance in [`MonteCarloSummary::within`] for floating-point
/// rounding.
pub const ROUNDING_SLACK: f64 = 1e-12;

/// The random stream `stream` of generator `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives an independent seed for a named purpose (FNV-1a over the tag,
/// mixed with `seed`).
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.bytes().chain(seed.to_le_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Sum by a balanced binary tree over index order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        len => {
            let (a, b) = values.split_at(len / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Sample mean of per-replication values with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub estimate: f64,
    /// Sample standard deviation over `√reps`.
    pub std_error: f64,
    pub reps: u64,
    pub seed: u64,
}

impl MonteCarloSummary {
    pub fn from_values(values: &[f64], seed: u64) -> Result<Self> {
        let reps = values.len();
        if reps < 2 {
            return Err(Error::InvalidArgument(format!(
                "reps must be >= 2, got {reps}"
            )));
        }
        let mean = pairwise_sum(values) / reps as f64;
        let dev: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
        let var = pairwise_sum(&dev) / (reps - 1) as f64;
        Ok(Self {
            estimate: mean,
            std_error: (var / reps as f64).sqrt(),
            reps: reps as u64,
            seed,
        })
    }

    /// `|estimate - target| <= k * std_error`, plus [`ROUNDING_SLACK`]
    /// relative to `max(1, |target|)` so that replications which are
    /// constant up to rounding (standard error near zero) still compare.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.estimate - target).abs()
            <= k * self.std_error + ROUNDING_SLACK * target.abs().max(1.0)
    }
}

fn pick(cumulative: &[f64], u: f64) -> usize {
    cumulative
        .partition_point(|&c| c <= u)
        .min(cumulative.len() - 1)
}

fn cumulative(probs: &[f64]) -> Vec<f64> {
    probs
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect()
}

/// Draws error vectors from an [`ErrorLaw`].
#[derive(Debug, Clone)]
pub struct Sampler {
    kind: SamplerKind,
}

#[derive(Debug, Clone)]
enum SamplerKind {
    Independent(Vec<(DiscreteMarginal, Vec<f64>)>),
    Joint {
        points: Vec<DVector<f64>>,
        cumulative: Vec<f64>,
    },
}

impl Sampler {
    pub fn new(law: &ErrorLaw) -> Self {
        let kind = match law {
            ErrorLaw::Independent { marginals } => SamplerKind::Independent(
                marginals
                    .iter()
                    .map(|m| (m.clone(), cumulative(m.probs())))
                    .collect(),
            ),
            ErrorLaw::Joint { distribution } => SamplerKind::Joint {
                points: (0..distribution.len())
                    .map(|i| distribution.point(i))
                    .collect(),
                cumulative: cumulative(distribution.weights().as_slice()),
            },
        };
        Self { kind }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match &self.kind {
            SamplerKind::Independent(margs) => DVector::from_iterator(
                margs.len(),
                margs
                    .iter()
                    .map(|(m, cum)| m.values()[pick(cum, rng.random::<f64>())]),
            ),
            SamplerKind::Joint { points, cumulative } => {
                points[pick(cumulative, rng.random::<f64>())].clone()
            }
        }
    }
}

/// Monte Carlo estimates of `Var(c'β̂_OLS)`, `Var(c'β̂_α)` and their
/// difference, at `β = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceSimulation {
    pub var_ols: MonteCarloSummary,
    pub var_alpha: MonteCarloSummary,
    /// Per-replication `(c'β̂_OLS)² - (c'β̂_α)²`.
    pub improvement: MonteCarloSummary,
}

/// Both estimators are unbiased, so with `β = 0` the squared values
/// `(c'β̂)²` average to the variances; no sample mean is subtracted.
pub fn simulate_variances(
    est: &QuadraticEstimator,
    c: &DVector<f64>,
    law: &ErrorLaw,
    reps: u64,
    seed: u64,
) -> Result<VarianceSimulation> {
    if reps < 2 {
        return Err(Error::InvalidArgument(format!(
            "reps must be >= 2, got {reps}"
        )));
    }
    check_len("c", c.len(), est.k())?;
    check_len("error law", law.dim(), est.n())?;
    let sampler = Sampler::new(law);
    let per_rep: Vec<(f64, f64)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r);
            let y = sampler.sample(&mut rng);
            let lin = c.dot(&est.linear_part(&y));
            let quad = c.dot(&est.quadratic_part(&y));
            let alt = lin + est.alpha() * quad;
            (lin * lin, alt * alt)
        })
        .collect();
    let ols: Vec<f64> = per_rep.iter().map(|p| p.0).collect();
    let alt: Vec<f64> = per_rep.iter().map(|p| p.1).collect();
    let diff: Vec<f64> = per_rep.iter().map(|p| p.0 - p.1).collect();
    Ok(VarianceSimulation {
        var_ols: MonteCarloSummary::from_values(&ols, seed)?,
        var_alpha: MonteCarloSummary::from_values(&alt, seed)?,
        improvement: MonteCarloSummary::from_values(&diff, seed)?,
    })
}
