//! Quadratic perturbations of unbiased linear estimators.
//!
//! An estimator `β̂(y) = A y + α (y'H_1 y, ..., y'H_k y)'` with `AX = I_k`
//! is unbiased under every mean-zero error law with covariance `σ²I` exactly
//! when each symmetric `H_i` satisfies `tr(H_i) = 0` and `X'H_i X = 0`. This
//! module computes that constraint space, builds such estimators, and offers
//! two analytic diagnostics: the bias they pick up once the covariance is
//! no longer scalar, and the eigenvalues of each `H_i`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, numerical_rank, quad_form, sorted_eigen, trace_inner};
use crate::moments::{FiniteSupportDistribution, SkewedTwoPoint};
use crate::regress::{check_len, DesignMatrix, UNBIASED_TOL};
use crate::sim::{derive_seed, stream_rng, DEFAULT_SEED};
use crate::{io, Error, Result};

/// Relative tolerance for the rank of the constraint map.
pub const CONSTRAINT_RANK_TOL: f64 = 1e-10;
/// Tolerance on `tr(H)` and `X'HX`, scaled by `max(1, ‖H‖)·max(1, ‖X‖²)`.
pub const CONSTRAINT_TOL: f64 = 1e-10;
/// Probe size for [`sigma_sweep_bias`].
pub const PROBE_EPS: f64 = 0.5;
/// Traces below this are not reported by [`sigma_sweep_bias`].
pub const SWEEP_THRESHOLD: f64 = 1e-8;

/// Number of free entries of a symmetric `n x n` matrix.
pub fn svec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

// Half-vectorisation with off-diagonal entries scaled by √2, so that the
// Euclidean inner product of two svecs equals tr(HG).
#[cfg(test)]
fn svec(h: &DMatrix<f64>) -> DVector<f64> {
    let n = h.nrows();
    let mut out = DVector::zeros(svec_len(n));
    let mut idx = 0;
    for l in 0..n {
        for m in l..n {
            out[idx] = if l == m {
                h[(l, l)]
            } else {
                std::f64::consts::SQRT_2 * h[(l, m)]
            };
            idx += 1;
        }
    }
    out
}

fn unsvec(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(n, n);
    let mut idx = 0;
    for l in 0..n {
        for m in l..n {
            if l == m {
                h[(l, l)] = v[idx];
            } else {
                let x = v[idx] / std::f64::consts::SQRT_2;
                h[(l, m)] = x;
                h[(m, l)] = x;
            }
            idx += 1;
        }
    }
    h
}

/// The linear map `H ↦ (tr H, (X'HX)_{ab} for a <= b)` in svec coordinates.
fn constraint_map(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = x.shape();
    let rows = 1 + svec_len(k);
    let mut c = DMatrix::zeros(rows, svec_len(n));
    let mut idx = 0;
    for l in 0..n {
        for m in l..n {
            if l == m {
                c[(0, idx)] = 1.0;
            }
            let mut row = 1;
            for a in 0..k {
                for b in a..k {
                    c[(row, idx)] = if l == m {
                        x[(l, a)] * x[(l, b)]
                    } else {
                        (x[(l, a)] * x[(m, b)] + x[(m, a)] * x[(l, b)]) / std::f64::consts::SQRT_2
                    };
                    row += 1;
                }
            }
            idx += 1;
        }
    }
    c
}

/// `(|tr H|, max |X'HX|)`.
pub fn constraint_residuals(design: &DesignMatrix, h: &DMatrix<f64>) -> (f64, f64) {
    let x = design.matrix();
    (h.trace().abs(), linalg::max_abs(&(x.transpose() * h * x)))
}

fn constraint_scale(design: &DesignMatrix, h: &DMatrix<f64>) -> f64 {
    h.norm().max(1.0) * design.matrix().norm_squared().max(1.0)
}

/// Orthonormal basis (under `⟨H, G⟩ = tr(HG)`) of the symmetric matrices
/// with `tr(H) = 0` and `X'HX = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HBasis {
    pub design: DesignMatrix,
    #[serde(with = "io::serde_matrix_list")]
    pub basis: Vec<DMatrix<f64>>,
    pub dim: usize,
    /// Numerical rank of the stacked constraint map.
    pub constraint_rank: usize,
}

impl HBasis {
    pub fn n(&self) -> usize {
        self.design.n()
    }

    /// `Σ coeffs[i] · basis[i]`.
    pub fn combine(&self, coeffs: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        self.basis
            .iter()
            .zip(coeffs)
            .fold(DMatrix::zeros(n, n), |acc, (b, c)| acc + b * *c)
    }

    /// Orthogonal projection of a symmetric `H` onto the span.
    pub fn project(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let coeffs: Vec<f64> = self.basis.iter().map(|b| trace_inner(b, h)).collect();
        self.combine(&coeffs)
    }

    /// `‖H - proj(H)‖_F / max(1, ‖H‖_F)`.
    pub fn span_residual(&self, h: &DMatrix<f64>) -> f64 {
        let h = linalg::symmetrize(h);
        (&h - self.project(&h)).norm() / h.norm().max(1.0)
    }

    /// A random element `Σ g_i B_i` with standard normal `g_i`.
    pub fn random_element<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let coeffs: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        self.combine(&coeffs)
    }
}

/// Computes the constraint space for `design`.
///
/// The basis is canonical: unit matrices are projected onto the null space
/// of the constraint map and orthonormalised greedily (largest remaining
/// norm first, lowest index on ties).
pub fn solve_h_space(design: &DesignMatrix) -> Result<HBasis> {
    let n = design.n();
    let big_n = svec_len(n);
    let c = constraint_map(design.matrix());
    let rank = numerical_rank(&c, CONSTRAINT_RANK_TOL);
    let dim = big_n - rank;

    // orthonormal rows spanning the constraint row space
    let svd = c.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let top = svd.singular_values.iter().fold(0.0_f64, |a, &b| a.max(b));
    let row_space: Vec<DVector<f64>> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > CONSTRAINT_RANK_TOL * top)
        .map(|(i, _)| v_t.row(i).transpose())
        .collect();

    let project_out = |v: &mut DVector<f64>, against: &[DVector<f64>]| {
        for q in against {
            let d = q.dot(v);
            v.axpy(-d, q, 1.0);
        }
    };

    let mut candidates: Vec<DVector<f64>> = (0..big_n)
        .map(|i| {
            let mut e = DVector::zeros(big_n);
            e[i] = 1.0;
            project_out(&mut e, &row_space);
            project_out(&mut e, &row_space);
            e
        })
        .collect();
    let mut chosen: Vec<DVector<f64>> = Vec::with_capacity(dim);
    let mut used = vec![false; big_n];
    while chosen.len() < dim {
        let (best, norm) = candidates
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, v)| (i, v.norm()))
            .fold(
                (usize::MAX, -1.0),
                |acc, (i, nv)| if nv > acc.1 { (i, nv) } else { acc },
            );
        if best == usize::MAX || norm <= 1e-8 {
            return Err(Error::RankDeficient(
                "constraint null space could not be resolved numerically".into(),
            ));
        }
        used[best] = true;
        let mut q = candidates[best].clone();
        project_out(&mut q, &row_space);
        project_out(&mut q, &chosen);
        q /= q.norm();
        for (i, v) in candidates.iter_mut().enumerate() {
            if !used[i] {
                let d = q.dot(v);
                v.axpy(-d, &q, 1.0);
            }
        }
        chosen.push(q);
    }
    let basis = chosen.iter().map(|v| unsvec(v, n)).collect();
    Ok(HBasis {
        design: design.clone(),
        basis,
        dim,
        constraint_rank: rank,
    })
}

/// `β̂(y) = A y + α (y'H_1 y, ..., y'H_k y)'`.
///
/// JSON: `{"A": [[...]], "H": [[[...]], ...], "alpha": ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuadraticRepr", into = "QuadraticRepr")]
pub struct QuadraticEstimator {
    a: DMatrix<f64>,
    h: Vec<DMatrix<f64>>,
    alpha: f64,
}

#[derive(Serialize, Deserialize)]
struct QuadraticRepr {
    #[serde(rename = "A", with = "io::serde_matrix")]
    a: DMatrix<f64>,
    #[serde(rename = "H", with = "io::serde_matrix_list")]
    h: Vec<DMatrix<f64>>,
    alpha: f64,
}

impl TryFrom<QuadraticRepr> for QuadraticEstimator {
    type Error = Error;

    fn try_from(r: QuadraticRepr) -> Result<Self> {
        Self::new(r.a, r.h, r.alpha)
    }
}

impl From<QuadraticEstimator> for QuadraticRepr {
    fn from(q: QuadraticEstimator) -> Self {
        Self {
            a: q.a,
            h: q.h,
            alpha: q.alpha,
        }
    }
}

impl QuadraticEstimator {
    /// Shape checks only; each `H_i` is replaced by `(H_i + H_i')/2`.
    pub fn new(a: DMatrix<f64>, h: Vec<DMatrix<f64>>, alpha: f64) -> Result<Self> {
        let (k, n) = a.shape();
        check_len("H list", h.len(), k)?;
        for hi in &h {
            if hi.shape() != (n, n) {
                return Err(Error::DimensionMismatch(format!(
                    "H_i is {}x{}, expected {n}x{n}",
                    hi.nrows(),
                    hi.ncols()
                )));
            }
        }
        if !alpha.is_finite() {
            return Err(Error::InvalidArgument("alpha must be finite".into()));
        }
        let h = h.iter().map(linalg::symmetrize).collect();
        Ok(Self { a, h, alpha })
    }

    pub fn k(&self) -> usize {
        self.a.nrows()
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn h(&self) -> &[DMatrix<f64>] {
        &self.h
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self {
            alpha,
            ..self.clone()
        }
    }

    pub fn linear_part(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.a * y
    }

    /// `(y'H_1 y, ..., y'H_k y)'`, without the factor `α`.
    pub fn quadratic_part(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.k(), self.h.iter().map(|h| quad_form(h, y)))
    }

    pub fn estimate(&self, y: &DVector<f64>) -> DVector<f64> {
        self.linear_part(y) + self.quadratic_part(y) * self.alpha
    }

    /// Checks `AX = I_k`, `tr(H_i) = 0`, `X'H_iX = 0`.
    pub fn check_constraints(&self, design: &DesignMatrix) -> Result<()> {
        check_len("A columns", self.n(), design.n())?;
        check_len("A rows", self.k(), design.k())?;
        let k = design.k();
        let lin = linalg::max_abs(&(&self.a * design.matrix() - DMatrix::identity(k, k)));
        if lin > UNBIASED_TOL {
            return Err(Error::ConstraintViolated {
                constraint: "AX = I",
                index: 0,
                residual: lin,
            });
        }
        for (i, h) in self.h.iter().enumerate() {
            let (tr, xhx) = constraint_residuals(design, h);
            let tol = CONSTRAINT_TOL * constraint_scale(design, h);
            if tr > tol {
                return Err(Error::ConstraintViolated {
                    constraint: "tr(H) = 0",
                    index: i,
                    residual: tr,
                });
            }
            if xhx > tol {
                return Err(Error::ConstraintViolated {
                    constraint: "X'HX = 0",
                    index: i,
                    residual: xhx,
                });
            }
        }
        Ok(())
    }
}

/// `β̂_OLS + α (y'H_i y)_i`, rejecting any `H_i` outside the constraint space.
pub fn make_perturbed_ols(
    design: &DesignMatrix,
    h: Vec<DMatrix<f64>>,
    alpha: f64,
) -> Result<QuadraticEstimator> {
    let est = QuadraticEstimator::new(design.ols_map(), h, alpha)?;
    est.check_constraints(design)?;
    Ok(est)
}

/// Largest exact bias over the cross-check laws of [`verify_unbiased_f2zero`].
pub fn enumerated_bias(
    est: &QuadraticEstimator,
    design: &DesignMatrix,
    dist: &FiniteSupportDistribution,
    beta: &DVector<f64>,
) -> Result<f64> {
    let shifted = dist.shifted(&(design.matrix() * beta))?;
    let mean = shifted.expectation(|y| est.estimate(y));
    Ok((mean - beta).amax())
}

/// A correlated, skewed law with covariance `I_n`: on each axis `q_i` of a
/// random orthonormal frame it puts mass `p_i/n` at `a_i √n q_i` and
/// `(1-p_i)/n` at `b_i √n q_i`, where `(a_i, b_i, p_i)` is a mean-zero
/// unit-variance two-point law.
///
/// With `skewed = false` every axis law is symmetric (`p_i = 1/2`), so all
/// third moments vanish.
pub fn random_identity_covariance_law<R: Rng + ?Sized>(
    n: usize,
    skewed: bool,
    rng: &mut R,
) -> Result<FiniteSupportDistribution> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let scale = (n as f64).sqrt();
    let mut support = DMatrix::zeros(n, 2 * n);
    let mut weights = DVector::zeros(2 * n);
    for i in 0..n {
        let p = if skewed {
            rng.random_range(0.15..0.85)
        } else {
            0.5
        };
        let base = SkewedTwoPoint::new(1.0, p)?;
        let axis = q.column(i);
        support.set_column(2 * i, &(axis * (scale * base.upper())));
        support.set_column(2 * i + 1, &(axis * (scale * base.lower())));
        weights[2 * i] = p / n as f64;
        weights[2 * i + 1] = (1.0 - p) / n as f64;
    }
    FiniteSupportDistribution::new(support, weights)
}

/// Unbiasedness over all mean-`Xβ` laws with covariance `σ²I`: the
/// structural constraints, cross-checked by exact enumeration under five
/// random correlated laws with covariance `I` and random `β`.
pub fn verify_unbiased_f2zero(est: &QuadraticEstimator, design: &DesignMatrix) -> bool {
    if est.check_constraints(design).is_err() {
        return false;
    }
    let seed = derive_seed(DEFAULT_SEED, "verify_unbiased_f2zero");
    (0..5).all(|t| {
        let mut rng = stream_rng(seed, t);
        let Ok(dist) = random_identity_covariance_law(design.n(), true, &mut rng) else {
            return false;
        };
        let beta = DVector::from_fn(design.k(), |_, _| rng.random_range(-1.0..1.0));
        enumerated_bias(est, design, &dist, &beta).is_ok_and(|b| b < 1e-10 * beta.amax().max(1.0))
    })
}

/// One probe covariance of [`sigma_sweep_bias`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaProbe {
    /// Probe indices `(j, l)`; `j == l` for the diagonal probes.
    pub j: usize,
    pub l: usize,
    #[serde(with = "io::serde_matrix")]
    pub sigma: DMatrix<f64>,
    /// `tr(H_i Σ)` for each `i`.
    #[serde(with = "io::serde_vector")]
    pub traces: DVector<f64>,
    /// `α · tr(H_i Σ)`: the bias of the estimator at unit error scale.
    #[serde(with = "io::serde_vector")]
    pub bias: DVector<f64>,
}

/// Bias of `est` under covariances `I + ε e_j e_j'` and
/// `I + ε (e_j e_l' + e_l e_j')`, `j <= l`, with `ε = PROBE_EPS`.
pub fn sigma_sweep_bias(est: &QuadraticEstimator) -> Vec<SigmaProbe> {
    sigma_sweep_bias_with(est, PROBE_EPS)
}

/// [`sigma_sweep_bias`] with a caller-chosen `ε ∈ (0, 1)`.
pub fn sigma_sweep_bias_with(est: &QuadraticEstimator, eps: f64) -> Vec<SigmaProbe> {
    let n = est.n();
    let mut out = Vec::new();
    for j in 0..n {
        for l in j..n {
            let mut sigma = DMatrix::identity(n, n);
            if j == l {
                sigma[(j, j)] += eps;
            } else {
                sigma[(j, l)] += eps;
                sigma[(l, j)] += eps;
            }
            let traces =
                DVector::from_iterator(est.k(), est.h().iter().map(|h| trace_inner(h, &sigma)));
            if traces.amax() > SWEEP_THRESHOLD {
                let bias = &traces * est.alpha();
                out.push(SigmaProbe {
                    j,
                    l,
                    sigma,
                    traces,
                    bias,
                });
            }
        }
    }
    out
}

/// Eigenvalues of each `H_j`, sorted in descending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenDiagnostic {
    pub eigenvalues: Vec<Vec<f64>>,
}

impl EigenDiagnostic {
    /// All eigenvalues vanish within `1e-10`: the estimator is linear.
    pub fn is_linear(&self) -> bool {
        self.eigenvalues.iter().flatten().all(|l| l.abs() <= 1e-10)
    }
}

/// Diagonalises each `H_j`. A nonzero eigenvalue means `E‖β̂‖²` involves
/// fourth moments of rotated errors, so the estimator has infinite second
/// moment under some error law with finite variance.
pub fn eigen_diagnostic(est: &QuadraticEstimator) -> EigenDiagnostic {
    EigenDiagnostic {
        eigenvalues: est
            .h()
            .iter()
            .map(|h| {
                let (mut v, _) = sorted_eigen(h);
                v.reverse();
                v
            })
            .collect(),
    }
}
