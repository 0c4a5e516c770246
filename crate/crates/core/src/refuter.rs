//! Black-box tests of linearity and broad-class unbiasedness.
//!
//! An estimator that is unbiased under every finite-variance error law must
//! have zero expectation under every mean-zero finite-support law whose
//! support spans `R^n`. Two families of such laws pin the estimator down:
//!
//! - `(I, -I)` and `(I, -I, z, -z)` with uniform weights; comparing the two
//!   expectations isolates `β̂(z) + β̂(-z)`, forcing oddness.
//! - `((y_i + z_i) e_i)_i, -y, -z, I, -I` with uniform weights, which
//!   together with oddness forces additivity.
//!
//! Additivity plus measurability gives linearity. Only the finite
//! consequences can be probed numerically; a `Pass` here means "no
//! refutation within budget", never a proof.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_rational::Ratio;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::koopmann::QuadraticEstimator;
use crate::moments::{DiscreteMarginal, FiniteSupportDistribution, ENUMERATION_CAP};
use crate::regress::{check_full_column_rank, check_len, DesignMatrix, LinearEstimator};
use crate::sim::{derive_seed, stream_rng};
use crate::{io, Error, Result};

/// A probe expectation further than this from `β` is a refutation.
pub const REFUTE_TOL: f64 = 1e-8;
/// Bias tolerance for the independent-coordinates check.
pub const FSTAR_TOL: f64 = 1e-10;
/// Probe vectors are drawn from `{-GRID, ..., GRID}^n`.
pub const GRID: i32 = 3;

/// An estimator evaluated only through `y ↦ β̂(y)`.
pub trait BlackBox: Send + Sync {
    fn label(&self) -> String;

    fn eval(&self, y: &DVector<f64>) -> DVector<f64>;

    /// `false` asks the harness to evaluate on a single thread.
    fn concurrent(&self) -> bool {
        true
    }
}

impl BlackBox for LinearEstimator {
    fn label(&self) -> String {
        format!("linear {}x{}", self.matrix().nrows(), self.matrix().ncols())
    }

    fn eval(&self, y: &DVector<f64>) -> DVector<f64> {
        self.estimate(y)
    }
}

impl BlackBox for QuadraticEstimator {
    fn label(&self) -> String {
        format!("quadratic (alpha = {})", self.alpha())
    }

    fn eval(&self, y: &DVector<f64>) -> DVector<f64> {
        self.estimate(y)
    }
}

type EvalFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;

/// A closure with a label.
#[derive(Clone)]
pub struct BlackBoxEstimator {
    label: String,
    eval: Arc<EvalFn>,
    serial: bool,
}

impl BlackBoxEstimator {
    pub fn new<F>(label: impl Into<String>, eval: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            label: label.into(),
            eval: Arc::new(eval),
            serial: false,
        }
    }

    /// Marks the estimator as requiring single-threaded evaluation.
    pub fn serial(mut self) -> Self {
        self.serial = true;
        self
    }
}

impl std::fmt::Debug for BlackBoxEstimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlackBoxEstimator")
            .field("label", &self.label)
            .field("serial", &self.serial)
            .finish_non_exhaustive()
    }
}

impl BlackBox for BlackBoxEstimator {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn eval(&self, y: &DVector<f64>) -> DVector<f64> {
        (self.eval)(y)
    }

    fn concurrent(&self) -> bool {
        !self.serial
    }
}

/// `E β̂` under `dist`, honouring the estimator's concurrency declaration.
pub fn probe_expectation<E: BlackBox + ?Sized>(
    est: &E,
    dist: &FiniteSupportDistribution,
) -> DVector<f64> {
    if est.concurrent() {
        dist.expectation(|y| est.eval(y))
    } else {
        dist.expectation_serial(|y| est.eval(y))
    }
}

/// Mean-zero probe laws whose support spans `R^n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFamily {
    pub probes: Vec<FiniteSupportDistribution>,
}

impl ProbeFamily {
    pub fn new(probes: Vec<FiniteSupportDistribution>) -> Result<Self> {
        for (i, p) in probes.iter().enumerate() {
            let scale = p.support().amax().max(1.0);
            if p.mean().amax() > 1e-12 * scale {
                return Err(Error::InvalidDistribution(format!(
                    "probe {i} has nonzero mean"
                )));
            }
            if p.support_rank() != p.dim() {
                return Err(Error::InvalidDistribution(format!(
                    "probe {i} support does not span R^{}",
                    p.dim()
                )));
            }
        }
        Ok(Self { probes })
    }
}

fn cross_polytope(n: usize) -> DMatrix<f64> {
    let mut v = DMatrix::zeros(n, 2 * n);
    for i in 0..n {
        v[(i, i)] = 1.0;
        v[(i, n + i)] = -1.0;
    }
    v
}

/// Exact weights of the two oddness probes: `1/(2n)` on `2n` points and
/// `1/(2(n+1))` on `2n+2` points.
pub fn step1_weights_exact(n: usize) -> (Vec<Ratio<i64>>, Vec<Ratio<i64>>) {
    let n = n as i64;
    (
        vec![Ratio::new(1, 2 * n); 2 * n as usize],
        vec![Ratio::new(1, 2 * (n + 1)); 2 * (n as usize + 1)],
    )
}

/// The oddness probes `μ(I,-I)` and `μ(I,-I,z,-z)` with uniform weights.
pub fn step1_probes(z: &DVector<f64>) -> Result<ProbeFamily> {
    let n = z.len();
    if n == 0 {
        return Err(Error::InvalidArgument("z must be non-empty".into()));
    }
    let v1 = cross_polytope(n);
    let mut v2 = DMatrix::zeros(n, 2 * n + 2);
    v2.columns_mut(0, 2 * n).copy_from(&v1);
    v2.set_column(2 * n, z);
    v2.set_column(2 * n + 1, &(-z));
    let (w1, w2) = step1_weights_exact(n);
    let to_f64 = |w: &[Ratio<i64>]| {
        DVector::from_iterator(
            w.len(),
            w.iter().map(|r| *r.numer() as f64 / *r.denom() as f64),
        )
    };
    ProbeFamily::new(vec![
        FiniteSupportDistribution::new(v1, to_f64(&w1))?,
        FiniteSupportDistribution::new(v2, to_f64(&w2))?,
    ])
}

/// The additivity probe on `((y_i+z_i) e_i)_i, -y, -z, I, -I`, uniform
/// weights `1/(3n+2)`.
pub fn step2_probe(y: &DVector<f64>, z: &DVector<f64>) -> Result<FiniteSupportDistribution> {
    let n = y.len();
    check_len("z", z.len(), n)?;
    if n == 0 {
        return Err(Error::InvalidArgument("y must be non-empty".into()));
    }
    let mut v = DMatrix::zeros(n, 3 * n + 2);
    for i in 0..n {
        v[(i, i)] = y[i] + z[i];
    }
    v.set_column(n, &(-y));
    v.set_column(n + 1, &(-z));
    v.columns_mut(n + 2, 2 * n).copy_from(&cross_polytope(n));
    FiniteSupportDistribution::uniform(v)
}

/// `β̂(z) + β̂(-z)`.
pub fn oddness_deficit<E: BlackBox + ?Sized>(est: &E, z: &DVector<f64>) -> DVector<f64> {
    est.eval(z) + est.eval(&(-z))
}

/// `β̂(y) + β̂(z) - β̂(y + z)`.
pub fn additivity_deficit<E: BlackBox + ?Sized>(
    est: &E,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> DVector<f64> {
    est.eval(y) + est.eval(z) - est.eval(&(y + z))
}

/// `{2, 3, 1/2, 1/3, -1, 5/7}`.
pub fn default_ratios() -> Vec<Ratio<i64>> {
    vec![
        Ratio::from_integer(2),
        Ratio::from_integer(3),
        Ratio::new(1, 2),
        Ratio::new(1, 3),
        Ratio::from_integer(-1),
        Ratio::new(5, 7),
    ]
}

/// `max_r ‖β̂(r z) - r β̂(z)‖` over the given rationals.
pub fn homogeneity_deficit<E: BlackBox + ?Sized>(
    est: &E,
    z: &DVector<f64>,
    ratios: &[Ratio<i64>],
) -> f64 {
    let base = est.eval(z);
    ratios
        .iter()
        .map(|r| {
            let r = *r.numer() as f64 / *r.denom() as f64;
            (est.eval(&(z * r)) - &base * r).norm()
        })
        .fold(0.0, f64::max)
}

/// A law under which `E β̂ ≠ β`. The probe is stored in full so anyone can
/// re-verify the claim by summation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refutation {
    pub estimator: String,
    pub attempt: usize,
    pub probe_kind: String,
    pub probe: FiniteSupportDistribution,
    #[serde(with = "io::serde_vector")]
    pub beta: DVector<f64>,
    #[serde(with = "io::serde_vector")]
    pub expectation: DVector<f64>,
    /// `‖E β̂ - β‖`.
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum RefutationOutcome {
    /// No refutation among `probes_checked` laws.
    Pass {
        probes_checked: usize,
    },
    Refutation(Box<Refutation>),
}

impl RefutationOutcome {
    pub fn is_pass(&self) -> bool {
        matches!(self, Self::Pass { .. })
    }

    pub fn refutation(&self) -> Option<&Refutation> {
        match self {
            Self::Refutation(r) => Some(r),
            Self::Pass { .. } => None,
        }
    }
}

fn grid_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(len, |_, _| f64::from(rng.random_range(-GRID..=GRID)))
}

/// Evaluates `E β̂` under `probe` shifted by `Xβ`; returns the refutation if
/// it misses `β` by more than `tol`.
fn check_probe<E: BlackBox + ?Sized>(
    est: &E,
    design: &DesignMatrix,
    probe: &FiniteSupportDistribution,
    beta: &DVector<f64>,
    kind: &str,
    attempt: usize,
    tol: f64,
) -> Result<Option<Refutation>> {
    let shifted = probe.shifted(&(design.matrix() * beta))?;
    let expectation = probe_expectation(est, &shifted);
    check_len("estimator output", expectation.len(), design.k())?;
    let norm = (&expectation - beta).norm();
    Ok((norm > tol).then(|| Refutation {
        estimator: est.label(),
        attempt,
        probe_kind: kind.to_string(),
        probe: shifted,
        beta: beta.clone(),
        expectation,
        norm,
    }))
}

/// Searches the oddness and additivity probes, shifted to mean `Xβ`, for a
/// law under which `est` is biased. Attempt `t` draws integer `y`, `z` and
/// `β` from stream `t`; the first failing probe is returned.
pub fn refute_f2_unbiasedness<E: BlackBox + ?Sized>(
    est: &E,
    design: &DesignMatrix,
    budget: usize,
    seed: u64,
) -> Result<RefutationOutcome> {
    refute_f2_unbiasedness_with_tol(est, design, budget, seed, REFUTE_TOL)
}

/// [`refute_f2_unbiasedness`] with a caller-chosen refutation threshold.
pub fn refute_f2_unbiasedness_with_tol<E: BlackBox + ?Sized>(
    est: &E,
    design: &DesignMatrix,
    budget: usize,
    seed: u64,
    tol: f64,
) -> Result<RefutationOutcome> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    if budget == 0 {
        return Err(Error::InvalidArgument("budget must be at least 1".into()));
    }
    let seed = derive_seed(seed, "refute_f2_unbiasedness");
    let (n, k) = (design.n(), design.k());
    let mut checked = 0;
    for t in 0..budget {
        let mut rng = stream_rng(seed, t as u64);
        let y = grid_vector(n, &mut rng);
        let z = grid_vector(n, &mut rng);
        let beta = grid_vector(k, &mut rng);
        let family = step1_probes(&z)?;
        let step2 = step2_probe(&y, &z)?;
        let probes = [
            ("step1:(I,-I)", &family.probes[0]),
            ("step1:(I,-I,z,-z)", &family.probes[1]),
            ("step2:(A(y,z),-y,-z,I,-I)", &step2),
        ];
        for (kind, probe) in probes {
            checked += 1;
            if let Some(r) = check_probe(est, design, probe, &beta, kind, t, tol)? {
                return Ok(RefutationOutcome::Refutation(Box::new(r)));
            }
        }
    }
    Ok(RefutationOutcome::Pass {
        probes_checked: checked,
    })
}

/// `β̃(y) = β̂_OLS(y) + y_i (y_j - x_j'β̂_{-i}(y)) a`, where `β̂_{-i}` is OLS
/// with observation `i` deleted. Indices are zero-based.
#[derive(Debug, Clone)]
pub struct HansenTilde {
    design: DesignMatrix,
    i: usize,
    j: usize,
    a: DVector<f64>,
    ols_map: DMatrix<f64>,
    // y ↦ y_j - x_j'β̂_{-i}(y), as a row vector over all n coordinates
    residual_weights: DVector<f64>,
}

/// Builds [`HansenTilde`].
pub fn hansen_tilde(
    design: &DesignMatrix,
    i: usize,
    j: usize,
    a: DVector<f64>,
) -> Result<HansenTilde> {
    let (n, k) = (design.n(), design.k());
    if i >= n || j >= n || i == j {
        return Err(Error::InvalidArgument(format!(
            "need distinct row indices below {n}, got i = {i}, j = {j}"
        )));
    }
    check_len("a", a.len(), k)?;
    if a.amax() == 0.0 {
        return Err(Error::InvalidArgument("a must be nonzero".into()));
    }
    let loo = design.without_row(i);
    if loo.nrows() < k || check_full_column_rank(&loo).is_err() {
        return Err(Error::LeaveOneOutRankDeficient { row: i });
    }
    let qr = loo.clone().qr();
    let loo_map = qr
        .r()
        .solve_upper_triangular(&qr.q().transpose())
        .ok_or(Error::LeaveOneOutRankDeficient { row: i })?;
    let xj = design.matrix().row(j).transpose();
    let coef = loo_map.transpose() * xj;
    let mut residual_weights = DVector::zeros(n);
    for (pos, row) in (0..n).filter(|&r| r != i).enumerate() {
        residual_weights[row] = -coef[pos];
    }
    residual_weights[j] += 1.0;
    Ok(HansenTilde {
        design: design.clone(),
        i,
        j,
        a,
        ols_map: design.ols_map(),
        residual_weights,
    })
}

impl HansenTilde {
    pub fn design(&self) -> &DesignMatrix {
        &self.design
    }

    pub fn rows(&self) -> (usize, usize) {
        (self.i, self.j)
    }

    /// `y_j - x_j'β̂_{-i}(y)`.
    pub fn loo_residual(&self, y: &DVector<f64>) -> f64 {
        self.residual_weights.dot(y)
    }

    /// True when the leave-one-out residual vanishes identically, so the
    /// estimator is OLS.
    pub fn coincides_with_ols(&self) -> bool {
        self.residual_weights.amax() <= 1e-10
    }

    pub fn estimate(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.ols_map * y + &self.a * (y[self.i] * self.loo_residual(y))
    }
}

impl BlackBox for HansenTilde {
    fn label(&self) -> String {
        format!("hansen-tilde(i = {}, j = {})", self.i, self.j)
    }

    fn eval(&self, y: &DVector<f64>) -> DVector<f64> {
        self.estimate(y)
    }
}

/// Outcome of [`check_fstar_unbiasedness`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FStarCheck {
    /// Product laws with random marginals; expected to pass.
    pub independent: RefutationOutcome,
    /// Correlated laws; a refutation is expected unless the estimator is OLS.
    pub correlated: RefutationOutcome,
}

fn random_marginal<R: Rng + ?Sized>(atoms: usize, rng: &mut R) -> Result<DiscreteMarginal> {
    let raw: Vec<f64> = (0..atoms).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
    let values: Vec<f64> = (0..atoms).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mean: f64 = values.iter().zip(&probs).map(|(v, p)| v * p).sum();
    DiscreteMarginal::new(values.iter().map(|v| v - mean).collect(), probs)
}

/// Exact bias of `est` under independent-coordinate laws (random two- or
/// three-point marginals, random `β`), then a search for a correlated law
/// refuting unbiasedness: first the law on `(I, -I, u, -u)` with
/// `u = e_i + e_j`, which correlates exactly the two rows the estimator
/// multiplies, then the generic probes of [`refute_f2_unbiasedness`].
pub fn check_fstar_unbiasedness(est: &HansenTilde, budget: usize, seed: u64) -> Result<FStarCheck> {
    if budget == 0 {
        return Err(Error::InvalidArgument("budget must be at least 1".into()));
    }
    let design = &est.design;
    let (n, k) = (design.n(), design.k());
    if (n as u32) > ENUMERATION_CAP.trailing_zeros() {
        return Err(Error::SupportTooLarge {
            points: 1_u128 << n,
            cap: ENUMERATION_CAP,
        });
    }
    let atoms = if 3_f64.powi(n as i32) <= 4096.0 { 3 } else { 2 };
    let ind_seed = derive_seed(seed, "fstar-independent");
    let mut independent = RefutationOutcome::Pass {
        probes_checked: budget,
    };
    for t in 0..budget {
        let mut rng = stream_rng(ind_seed, t as u64);
        let marginals = (0..n)
            .map(|_| random_marginal(atoms, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let law = FiniteSupportDistribution::product(marginals)?;
        let beta: DVector<f64> = DVector::from_fn(k, |_, _| rng.random_range(-2.0..2.0));
        let tol = FSTAR_TOL * beta.amax().max(1.0);
        if let Some(r) = check_probe(est, design, &law, &beta, "independent", t, tol)? {
            independent = RefutationOutcome::Refutation(Box::new(r));
            break;
        }
    }

    let mut u = DVector::zeros(n);
    u[est.i] = 1.0;
    u[est.j] = 1.0;
    let coupling = step1_probes(&u)?;
    let beta = DVector::from_element(k, 1.0);
    let correlated = match check_probe(
        est,
        design,
        &coupling.probes[1],
        &beta,
        "coupled:(I,-I,e_i+e_j,-(e_i+e_j))",
        0,
        REFUTE_TOL,
    )? {
        Some(r) => RefutationOutcome::Refutation(Box::new(r)),
        None => match refute_f2_unbiasedness(est, design, budget, seed)? {
            RefutationOutcome::Pass { probes_checked } => RefutationOutcome::Pass {
                probes_checked: probes_checked + 1,
            },
            r => r,
        },
    };
    Ok(FStarCheck {
        independent,
        correlated,
    })
}
