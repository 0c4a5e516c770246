//! The fixed-design linear model: design matrices, OLS and GLS, linear
//! estimators and the Loewner order.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, sorted_eigen, symmetrize_checked};
use crate::{io, Error, Result};

/// Smallest admissible ratio of smallest to largest singular value of `X`.
pub const RANK_TOL: f64 = 1e-10;
/// Loewner tolerance, relative to `max(1, |tr(M1 - M2)|)`.
pub const LOEWNER_TOL: f64 = 1e-9;
/// Entrywise tolerance for `AX = I_k`.
pub const UNBIASED_TOL: f64 = 1e-9;

/// An `n x k` regressor matrix with `1 <= k < n` and full column rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct DesignMatrix {
    x: DMatrix<f64>,
    // thin QR factors of x, cached for the OLS solves
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        let (n, k) = x.shape();
        if k == 0 || k >= n {
            return Err(Error::RankDeficient(format!(
                "need 1 <= k < n, got n = {n}, k = {k}"
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "design has non-finite entries".into(),
            ));
        }
        check_full_column_rank(&x).map_err(Error::RankDeficient)?;
        let qr = x.clone().qr();
        Ok(Self {
            q: qr.q(),
            r: qr.r(),
            x,
        })
    }

    /// Location model: a single column of ones.
    pub fn location(n: usize) -> Result<Self> {
        Self::new(DMatrix::from_element(n, 1, 1.0))
    }

    /// Balanced one-way layout with `groups` groups of `per_group` observations.
    pub fn one_way(groups: usize, per_group: usize) -> Result<Self> {
        let n = groups * per_group;
        Self::new(DMatrix::from_fn(n, groups, |r, c| {
            if r / per_group.max(1) == c {
                1.0
            } else {
                0.0
            }
        }))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(io::matrix_from_rows(rows)?)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// `(X'X)^{-1} X'` as a `k x n` matrix, via the QR factors.
    pub fn ols_map(&self) -> DMatrix<f64> {
        self.r
            .solve_upper_triangular(&self.q.transpose())
            .expect("R is nonsingular for a full-rank design")
    }

    /// `d = X (X'X)^{-1} c`, the weights with `c'β̂_OLS = d'y`.
    pub fn ols_weights(&self, c: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("c", c.len(), self.k())?;
        Ok(self.ols_map().transpose() * c)
    }

    pub fn ols(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("y", y.len(), self.n())?;
        Ok(self
            .r
            .solve_upper_triangular(&(self.q.transpose() * y))
            .expect("R is nonsingular for a full-rank design"))
    }

    /// The GLS map `(X'Σ⁻¹X)⁻¹ X'Σ⁻¹`, computed by whitening with the
    /// Cholesky factor of `Σ`.
    pub fn gls_map(&self, cov: &CovarianceSpec) -> Result<DMatrix<f64>> {
        check_len("Sigma", cov.dim(), self.n())?;
        let l = cov.cholesky_l();
        let l_inv = l
            .solve_lower_triangular(&DMatrix::identity(self.n(), self.n()))
            .ok_or_else(|| Error::NotPositiveDefinite("singular Cholesky factor".into()))?;
        let xw = &l_inv * &self.x;
        let qr = xw.qr();
        let (q, r) = (qr.q(), qr.r());
        r.solve_upper_triangular(&(q.transpose() * l_inv))
            .ok_or_else(|| Error::RankDeficient("whitened design lost rank".into()))
    }

    pub fn gls(&self, cov: &CovarianceSpec, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("y", y.len(), self.n())?;
        Ok(self.gls_map(cov)? * y)
    }

    /// Deletes row `i`; the result may be square and is not a `DesignMatrix`.
    pub fn without_row(&self, i: usize) -> DMatrix<f64> {
        self.x.clone().remove_row(i)
    }
}

impl TryFrom<Vec<Vec<f64>>> for DesignMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<DesignMatrix> for Vec<Vec<f64>> {
    fn from(d: DesignMatrix) -> Self {
        io::matrix_to_rows(&d.x)
    }
}

pub(crate) fn check_full_column_rank(x: &DMatrix<f64>) -> std::result::Result<(), String> {
    let sv = x.singular_values();
    let top = sv.iter().fold(0.0_f64, |a, &b| a.max(b));
    let bottom = sv.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if top == 0.0 || bottom <= RANK_TOL * top {
        return Err(format!(
            "smallest singular value {bottom:e} vs largest {top:e}"
        ));
    }
    Ok(())
}

pub(crate) fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::DimensionMismatch(format!(
            "{what} has dimension {got}, expected {want}"
        )));
    }
    Ok(())
}

/// Error covariance `E ee' = σ² Σ` with `Σ` symmetric positive definite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CovarianceRepr", into = "CovarianceRepr")]
pub struct CovarianceSpec {
    sigma2: f64,
    sigma: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct CovarianceRepr {
    sigma2: f64,
    #[serde(rename = "Sigma")]
    sigma: Vec<Vec<f64>>,
}

impl TryFrom<CovarianceRepr> for CovarianceSpec {
    type Error = Error;

    fn try_from(r: CovarianceRepr) -> Result<Self> {
        Self::new(r.sigma2, io::matrix_from_rows(&r.sigma)?)
    }
}

impl From<CovarianceSpec> for CovarianceRepr {
    fn from(c: CovarianceSpec) -> Self {
        Self {
            sigma2: c.sigma2,
            sigma: io::matrix_to_rows(&c.sigma),
        }
    }
}

impl CovarianceSpec {
    pub fn new(sigma2: f64, sigma: DMatrix<f64>) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma2 must be > 0, got {sigma2}"
            )));
        }
        let sigma = symmetrize_checked(&sigma)?;
        let (eig, _) = sorted_eigen(&sigma);
        if eig.first().is_none_or(|&l| l <= 0.0) || Cholesky::new(sigma.clone()).is_none() {
            return Err(Error::NotPositiveDefinite(format!(
                "smallest eigenvalue {:e}",
                eig.first().copied().unwrap_or(f64::NAN)
            )));
        }
        Ok(Self { sigma2, sigma })
    }

    pub fn identity(n: usize, sigma2: f64) -> Result<Self> {
        Self::new(sigma2, DMatrix::identity(n, n))
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// `σ² Σ`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        &self.sigma * self.sigma2
    }

    fn cholesky_l(&self) -> DMatrix<f64> {
        Cholesky::new(self.sigma.clone())
            .expect("validated at construction")
            .l()
    }
}

/// The estimator `y ↦ A y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEstimator {
    #[serde(rename = "A", with = "io::serde_matrix")]
    a: DMatrix<f64>,
}

impl LinearEstimator {
    pub fn new(a: DMatrix<f64>) -> Self {
        Self { a }
    }

    pub fn ols(design: &DesignMatrix) -> Self {
        Self::new(design.ols_map())
    }

    pub fn gls(design: &DesignMatrix, cov: &CovarianceSpec) -> Result<Self> {
        Ok(Self::new(design.gls_map(cov)?))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn estimate(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.a * y
    }

    /// Largest entry of `|AX - I_k|`.
    pub fn unbiasedness_residual(&self, design: &DesignMatrix) -> Result<f64> {
        check_len("A columns", self.a.ncols(), design.n())?;
        check_len("A rows", self.a.nrows(), design.k())?;
        let k = design.k();
        let diff = &self.a * design.matrix() - DMatrix::identity(k, k);
        Ok(linalg::max_abs(&diff))
    }

    pub fn is_unbiased(&self, design: &DesignMatrix) -> bool {
        self.unbiasedness_residual(design)
            .is_ok_and(|r| r <= UNBIASED_TOL)
    }
}

/// `Var(A y) = σ² A Σ A'`.
pub fn linear_estimator_variance(
    est: &LinearEstimator,
    cov: &CovarianceSpec,
) -> Result<DMatrix<f64>> {
    check_len("A columns", est.a.ncols(), cov.dim())?;
    let v = &est.a * cov.shape() * est.a.transpose() * cov.sigma2();
    Ok(linalg::symmetrize(&v))
}

/// Outcome of comparing `M1` against `M2` in the Loewner order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoewnerVerdict {
    /// `M1 ⪰ M2` within tolerance.
    pub dominated: bool,
    /// Smallest eigenvalue of `M1 - M2`.
    pub min_eigenvalue: f64,
    /// Unit vector `c` with `c'(M1 - M2)c = min_eigenvalue`.
    #[serde(with = "io::serde_vector")]
    pub witness_direction: DVector<f64>,
    /// `max(1, |tr(M1 - M2)|)`.
    pub scale: f64,
}

/// Checks whether `M1 - M2` is positive semidefinite.
pub fn loewner_compare(m1: &DMatrix<f64>, m2: &DMatrix<f64>) -> Result<LoewnerVerdict> {
    if m1.shape() != m2.shape() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            m1.nrows(),
            m1.ncols(),
            m2.nrows(),
            m2.ncols()
        )));
    }
    let m1 = symmetrize_checked(m1)?;
    let m2 = symmetrize_checked(m2)?;
    let diff = m1 - m2;
    let scale = diff.trace().abs().max(1.0);
    let (values, vectors) = sorted_eigen(&diff);
    let min_eigenvalue = values[0];
    let mut witness = vectors.column(0).into_owned();
    // sign convention: the largest-magnitude component is positive
    let pivot = witness.iamax();
    if witness[pivot] < 0.0 {
        witness.neg_mut();
    }
    Ok(LoewnerVerdict {
        dominated: min_eigenvalue >= -LOEWNER_TOL * scale,
        min_eigenvalue,
        witness_direction: witness,
        scale,
    })
}
