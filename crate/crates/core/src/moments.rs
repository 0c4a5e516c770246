//! Error laws described two ways: by moments, for the analytic formulas, and
//! by finite support, for exact enumeration.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, compensated_sum, quad_form, sorted_eigen, symmetrize_checked};
use crate::regress::check_len;
use crate::{Error, Result};

/// Largest support size any enumeration is allowed to touch.
pub const ENUMERATION_CAP: usize = 1 << 20;
/// Full third-moment tensors are only materialised up to this dimension.
pub const TENSOR_MAX_DIM: usize = 32;
/// Tolerance on `Σ α_i = 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

// Enumeration work is split into chunks of this many support points; the
// partial sums are combined in chunk order so results do not depend on the
// number of worker threads.
const CHUNK: usize = 2048;

/// A distribution on the real line with finitely many atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMarginal {
    values: Vec<f64>,
    probs: Vec<f64>,
}

impl DiscreteMarginal {
    pub fn new(values: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.len() != probs.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} values vs {} probabilities",
                values.len(),
                probs.len()
            )));
        }
        check_weights(&probs)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDistribution("non-finite atom".into()));
        }
        Ok(Self { values, probs })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Raw moment `E X^r`.
    pub fn moment(&self, r: i32) -> f64 {
        compensated_sum(
            self.values
                .iter()
                .zip(&self.probs)
                .map(|(v, p)| p * v.powi(r)),
        )
    }

    pub fn shifted(&self, by: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v + by).collect(),
            probs: self.probs.clone(),
        }
    }
}

/// Mean-zero two-point law: `a = σ√((1-p)/p)` with probability `p`,
/// `b = -σ√(p/(1-p))` with probability `1-p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkewedTwoPoint {
    variance: f64,
    p: f64,
}

impl SkewedTwoPoint {
    pub fn new(variance: f64, p: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidDistribution(format!(
                "variance must be positive, got {variance}"
            )));
        }
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidDistribution(format!(
                "p must lie in (0,1), got {p}"
            )));
        }
        Ok(Self { variance, p })
    }

    /// `±σ` with equal probability.
    pub fn symmetric(variance: f64) -> Result<Self> {
        Self::new(variance, 0.5)
    }

    /// The two-point law with the given variance and third moment `E X³`.
    pub fn with_third_moment(variance: f64, third: f64) -> Result<Self> {
        let sigma = variance.sqrt();
        let s = third / (sigma * sigma * sigma);
        // (1-2p)/√(p(1-p)) = s  <=>  p = (1 - s/√(4+s²))/2
        Self::new(variance, 0.5 * (1.0 - s / (4.0 + s * s).sqrt()))
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn upper(&self) -> f64 {
        self.variance.sqrt() * ((1.0 - self.p) / self.p).sqrt()
    }

    pub fn lower(&self) -> f64 {
        -self.variance.sqrt() * (self.p / (1.0 - self.p)).sqrt()
    }

    /// `σ³ (1-2p)/√(p(1-p))`.
    pub fn third_moment(&self) -> f64 {
        let (s, p) = (self.variance.sqrt(), self.p);
        s * s * s * (1.0 - 2.0 * p) / (p * (1.0 - p)).sqrt()
    }

    /// `σ⁴ ((1-p)³ + p³)/(p(1-p))`.
    pub fn fourth_moment(&self) -> f64 {
        let p = self.p;
        let q = 1.0 - p;
        self.variance * self.variance * (q * q * q + p * p * p) / (p * q)
    }

    pub fn marginal(&self) -> DiscreteMarginal {
        if self.p == 0.5 {
            let s = self.variance.sqrt();
            return DiscreteMarginal {
                values: vec![s, -s],
                probs: vec![0.5, 0.5],
            };
        }
        DiscreteMarginal {
            values: vec![self.upper(), self.lower()],
            probs: vec![self.p, 1.0 - self.p],
        }
    }
}

fn check_weights(w: &[f64]) -> Result<()> {
    if let Some(bad) = w.iter().find(|&&a| !(a > 0.0 && a <= 1.0)) {
        return Err(Error::InvalidDistribution(format!(
            "weights must lie in (0, 1], found {bad}"
        )));
    }
    let total = compensated_sum(w.iter().copied());
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::InvalidDistribution(format!(
            "weights sum to {total}, not 1"
        )));
    }
    Ok(())
}

/// The law `Σ α_i δ_{v_i}` on `R^n`.
///
/// Serialised as `{"support": [[v_1...], [v_2...], ...], "weights": [...]}`,
/// one inner array per support point. Laws built by [`FiniteSupportDistribution::product`]
/// also carry their per-coordinate `marginals`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SupportRepr", into = "SupportRepr")]
pub struct FiniteSupportDistribution {
    // n x m, columns are support points
    support: DMatrix<f64>,
    weights: DVector<f64>,
    marginals: Option<Vec<DiscreteMarginal>>,
}

#[derive(Serialize, Deserialize)]
struct SupportRepr {
    support: Vec<Vec<f64>>,
    weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    marginals: Option<Vec<DiscreteMarginal>>,
}

impl TryFrom<SupportRepr> for FiniteSupportDistribution {
    type Error = Error;

    fn try_from(r: SupportRepr) -> Result<Self> {
        let points = crate::io::matrix_from_rows(&r.support)?;
        let dist = Self::new(points.transpose(), DVector::from_vec(r.weights))?;
        match r.marginals {
            None => Ok(dist),
            Some(m) => {
                let product = Self::product(m)?;
                if product.support != dist.support || product.weights != dist.weights {
                    return Err(Error::InvalidDistribution(
                        "declared marginals do not match the support".into(),
                    ));
                }
                Ok(product)
            }
        }
    }
}

impl From<FiniteSupportDistribution> for SupportRepr {
    fn from(d: FiniteSupportDistribution) -> Self {
        Self {
            support: crate::io::matrix_to_rows(&d.support.transpose()),
            weights: d.weights.as_slice().to_vec(),
            marginals: d.marginals,
        }
    }
}

impl FiniteSupportDistribution {
    /// `support` is `n x m` with support points as columns.
    pub fn new(support: DMatrix<f64>, weights: DVector<f64>) -> Result<Self> {
        if support.ncols() != weights.len() || support.ncols() == 0 || support.nrows() == 0 {
            return Err(Error::InvalidDistribution(format!(
                "{} support points vs {} weights",
                support.ncols(),
                weights.len()
            )));
        }
        if support.ncols() > ENUMERATION_CAP {
            return Err(Error::SupportTooLarge {
                points: support.ncols() as u128,
                cap: ENUMERATION_CAP,
            });
        }
        check_weights(weights.as_slice())?;
        if support.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDistribution(
                "non-finite support point".into(),
            ));
        }
        Ok(Self {
            support,
            weights,
            marginals: None,
        })
    }

    /// Uniform weights on the columns of `support`.
    pub fn uniform(support: DMatrix<f64>) -> Result<Self> {
        let m = support.ncols();
        Self::new(support, DVector::from_element(m, 1.0 / m as f64))
    }

    /// Independent coordinates with the given marginals. Point `i` takes
    /// atom `digit_j(i)` in coordinate `j`, with coordinate 0 varying fastest.
    pub fn product(marginals: Vec<DiscreteMarginal>) -> Result<Self> {
        if marginals.is_empty() {
            return Err(Error::InvalidDistribution("no coordinates".into()));
        }
        let size = marginals
            .iter()
            .try_fold(1_u128, |acc, m| acc.checked_mul(m.values.len() as u128))
            .unwrap_or(u128::MAX);
        if size > ENUMERATION_CAP as u128 {
            return Err(Error::SupportTooLarge {
                points: size,
                cap: ENUMERATION_CAP,
            });
        }
        let n = marginals.len();
        let m = size as usize;
        let mut support = DMatrix::zeros(n, m);
        let mut weights = DVector::zeros(m);
        for i in 0..m {
            let mut rest = i;
            let mut w = 1.0;
            for (j, marg) in marginals.iter().enumerate() {
                let a = rest % marg.values.len();
                rest /= marg.values.len();
                support[(j, i)] = marg.values[a];
                w *= marg.probs[a];
            }
            weights[i] = w;
        }
        let mut dist = Self::new(support, weights)?;
        dist.marginals = Some(marginals);
        Ok(dist)
    }

    /// `n` i.i.d. coordinates distributed as `base`.
    pub fn product_iid(base: &SkewedTwoPoint, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidDistribution("n must be at least 1".into()));
        }
        Self::product(vec![base.marginal(); n])
    }

    pub fn dim(&self) -> usize {
        self.support.nrows()
    }

    pub fn len(&self) -> usize {
        self.support.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn support(&self) -> &DMatrix<f64> {
        &self.support
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn point(&self, i: usize) -> DVector<f64> {
        self.support.column(i).into_owned()
    }

    pub fn marginals(&self) -> Option<&[DiscreteMarginal]> {
        self.marginals.as_deref()
    }

    pub fn is_product(&self) -> bool {
        self.marginals.is_some()
    }

    /// `V α`.
    pub fn mean(&self) -> DVector<f64> {
        &self.support * &self.weights
    }

    /// `V diag(α) V' - (Vα)(Vα)'`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut scaled = self.support.clone();
        for (mut col, w) in scaled.column_iter_mut().zip(self.weights.iter()) {
            col *= *w;
        }
        let raw = scaled * self.support.transpose();
        linalg::symmetrize(&(raw - &mean * mean.transpose()))
    }

    /// Numerical rank of the support matrix `V`.
    pub fn support_rank(&self) -> usize {
        linalg::numerical_rank(&self.support, 1e-10)
    }

    /// Translates every support point by `shift`.
    pub fn shifted(&self, shift: &DVector<f64>) -> Result<Self> {
        check_len("shift", shift.len(), self.dim())?;
        let mut support = self.support.clone();
        for mut col in support.column_iter_mut() {
            col += shift;
        }
        Ok(Self {
            support,
            weights: self.weights.clone(),
            marginals: self.marginals.as_ref().map(|ms| {
                ms.iter()
                    .zip(shift.iter())
                    .map(|(m, s)| m.shifted(*s))
                    .collect()
            }),
        })
    }

    /// `Σ_i α_i f(v_i)`, summed in a fixed order.
    pub fn expectation<F>(&self, f: F) -> DVector<f64>
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Sync,
    {
        self.reduce_chunks(|range| {
            let mut acc: Option<DVector<f64>> = None;
            for i in range {
                let v = f(&self.point(i)) * self.weights[i];
                acc = Some(match acc {
                    Some(a) => a + v,
                    None => v,
                });
            }
            acc.expect("chunks are non-empty")
        })
    }

    /// Like [`expectation`](Self::expectation) but evaluates `f` on one
    /// thread in index order, for estimators that are not safe to share.
    pub fn expectation_serial<F>(&self, mut f: F) -> DVector<f64>
    where
        F: FnMut(&DVector<f64>) -> DVector<f64>,
    {
        // same chunk boundaries as the parallel path so results agree bitwise
        let mut total: Option<DVector<f64>> = None;
        let m = self.len();
        let mut start = 0;
        while start < m {
            let end = (start + CHUNK).min(m);
            let mut acc: Option<DVector<f64>> = None;
            for i in start..end {
                let v = f(&self.point(i)) * self.weights[i];
                acc = Some(match acc {
                    Some(a) => a + v,
                    None => v,
                });
            }
            let acc = acc.expect("non-empty chunk");
            total = Some(match total {
                Some(t) => t + acc,
                None => acc,
            });
            start = end;
        }
        total.expect("support is non-empty")
    }

    pub fn expectation_scalar<F>(&self, f: F) -> f64
    where
        F: Fn(&DVector<f64>) -> f64 + Sync,
    {
        self.expectation(|v| DVector::from_element(1, f(v)))[0]
    }

    fn reduce_chunks<G>(&self, chunk_sum: G) -> DVector<f64>
    where
        G: Fn(std::ops::Range<usize>) -> DVector<f64> + Sync,
    {
        let m = self.len();
        let starts: Vec<usize> = (0..m).step_by(CHUNK).collect();
        let partials: Vec<DVector<f64>> = if starts.len() > 1 {
            starts
                .par_iter()
                .map(|&s| chunk_sum(s..(s + CHUNK).min(m)))
                .collect()
        } else {
            vec![chunk_sum(0..m)]
        };
        let mut it = partials.into_iter();
        let first = it.next().expect("support is non-empty");
        it.fold(first, |a, b| a + b)
    }
}

/// An error law that can be sampled and turned into a [`MomentModel`].
///
/// Independent laws are kept as marginals so that dimensions beyond the
/// enumeration cap remain usable with the analytic formulas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorLaw {
    Independent {
        marginals: Vec<DiscreteMarginal>,
    },
    Joint {
        distribution: FiniteSupportDistribution,
    },
}

impl ErrorLaw {
    pub fn iid(base: &SkewedTwoPoint, n: usize) -> Self {
        Self::Independent {
            marginals: vec![base.marginal(); n],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Independent { marginals } => marginals.len(),
            Self::Joint { distribution } => distribution.dim(),
        }
    }

    /// Moments computed from the marginals (independent laws) or by
    /// enumeration (joint laws).
    pub fn moment_model(&self) -> Result<MomentModel> {
        match self {
            Self::Independent { marginals } => {
                let n = marginals.len();
                let col = |r: i32| DVector::from_iterator(n, marginals.iter().map(|m| m.moment(r)));
                let model = MomentModel {
                    n,
                    mean: col(1),
                    second: DMatrix::from_diagonal(&col(2)),
                    third: ThirdMoments::Marginal { mu3: col(3) },
                    fourth_diag: Some(col(4).as_slice().to_vec()),
                    independent: true,
                    source: None,
                };
                model.validate()?;
                Ok(model)
            }
            Self::Joint { distribution } => Ok(moments_of(distribution)),
        }
    }

    /// Materialises the law as an explicit finite support.
    pub fn to_finite_support(&self) -> Result<FiniteSupportDistribution> {
        match self {
            Self::Independent { marginals } => {
                FiniteSupportDistribution::product(marginals.clone())
            }
            Self::Joint { distribution } => Ok(distribution.clone()),
        }
    }
}

/// Symmetric array `t[j,l,m] = E(e_j e_l e_m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThirdMomentTensor {
    n: usize,
    entries: Vec<f64>,
}

impl ThirdMomentTensor {
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n * n {
            return Err(Error::DimensionMismatch(format!(
                "tensor of dimension {n} needs {} entries, got {}",
                n * n * n,
                entries.len()
            )));
        }
        let t = Self { n, entries };
        let scale = t.entries.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
        for j in 0..n {
            for l in 0..n {
                for m in 0..n {
                    let v = t.get(j, l, m);
                    for w in [t.get(l, j, m), t.get(m, l, j), t.get(j, m, l)] {
                        if (v - w).abs() > linalg::SYM_TOL * scale {
                            return Err(Error::NotSymmetric {
                                asymmetry: (v - w).abs(),
                            });
                        }
                    }
                }
            }
        }
        Ok(t)
    }

    /// The tensor of independent mean-zero coordinates: only the diagonal
    /// `t[j,j,j] = mu3[j]` is nonzero.
    pub fn from_independent(mu3: &DVector<f64>) -> Self {
        let n = mu3.len();
        let mut entries = vec![0.0; n * n * n];
        for j in 0..n {
            entries[(j * n + j) * n + j] = mu3[j];
        }
        Self { n, entries }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, j: usize, l: usize, m: usize) -> f64 {
        self.entries[(j * self.n + l) * self.n + m]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

/// Third-moment information carried by a [`MomentModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThirdMoments {
    /// Full symmetric tensor.
    Tensor(ThirdMomentTensor),
    /// Independent coordinates: `mu3[j] = E e_j³`.
    Marginal {
        #[serde(with = "crate::io::serde_vector")]
        mu3: DVector<f64>,
    },
    /// Not available (e.g. dimension above [`TENSOR_MAX_DIM`]).
    Unavailable,
}

/// An error law described by its raw moments about the origin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentModel {
    pub n: usize,
    #[serde(with = "crate::io::serde_vector")]
    pub mean: DVector<f64>,
    /// `E ee'`.
    #[serde(with = "crate::io::serde_matrix")]
    pub second: DMatrix<f64>,
    pub third: ThirdMoments,
    /// `E e_j⁴`, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fourth_diag: Option<Vec<f64>>,
    pub independent: bool,
    /// The finite-support law these moments were enumerated from.
    #[serde(skip)]
    source: Option<Arc<FiniteSupportDistribution>>,
}

impl PartialEq for MomentModel {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
            && self.mean == other.mean
            && self.second == other.second
            && self.third == other.third
            && self.fourth_diag == other.fourth_diag
            && self.independent == other.independent
    }
}

impl MomentModel {
    /// Mean-zero independent coordinates with `E e_j² = mu2[j]`,
    /// `E e_j³ = mu3[j]` and optionally `E e_j⁴ = mu4[j]`.
    pub fn independent(
        mu2: DVector<f64>,
        mu3: DVector<f64>,
        mu4: Option<DVector<f64>>,
    ) -> Result<Self> {
        let n = mu2.len();
        check_len("mu3", mu3.len(), n)?;
        if let Some(m4) = &mu4 {
            check_len("mu4", m4.len(), n)?;
        }
        let model = Self {
            n,
            mean: DVector::zeros(n),
            second: DMatrix::from_diagonal(&mu2),
            third: ThirdMoments::Marginal { mu3 },
            fourth_diag: mu4.map(|v| v.as_slice().to_vec()),
            independent: true,
            source: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// Mean-zero law with arbitrary dependence.
    pub fn general(
        second: DMatrix<f64>,
        third: Option<ThirdMomentTensor>,
        fourth_diag: Option<DVector<f64>>,
    ) -> Result<Self> {
        let n = second.nrows();
        let third = match third {
            Some(t) => {
                check_len("third-moment tensor", t.dim(), n)?;
                ThirdMoments::Tensor(t)
            }
            None => ThirdMoments::Unavailable,
        };
        let model = Self {
            n,
            mean: DVector::zeros(n),
            second,
            third,
            fourth_diag: fourth_diag.map(|v| v.as_slice().to_vec()),
            independent: false,
            source: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// Structural checks: symmetric second moments, independence layout,
    /// `E e⁴ >= (E e²)²`.
    pub fn validate(&self) -> Result<()> {
        check_len("second-moment matrix", self.second.nrows(), self.n)?;
        check_len("mean", self.mean.len(), self.n)?;
        symmetrize_checked(&self.second)?;
        if self.independent {
            let off = (0..self.n)
                .flat_map(|i| (0..self.n).filter(move |&j| j != i).map(move |j| (i, j)))
                .any(|(i, j)| self.second[(i, j)] != 0.0);
            if off {
                return Err(Error::InvalidModel(
                    "independent model needs a diagonal second-moment matrix".into(),
                ));
            }
            if !matches!(self.third, ThirdMoments::Marginal { .. }) {
                return Err(Error::InvalidModel(
                    "independent model stores third moments as a vector".into(),
                ));
            }
        }
        match &self.third {
            ThirdMoments::Marginal { mu3 } => check_len("mu3", mu3.len(), self.n)?,
            ThirdMoments::Tensor(t) => check_len("third-moment tensor", t.dim(), self.n)?,
            ThirdMoments::Unavailable => {}
        }
        if let Some(m4) = &self.fourth_diag {
            check_len("fourth moments", m4.len(), self.n)?;
            for (j, &m) in m4.iter().enumerate() {
                let s = self.second[(j, j)];
                if m < s * s * (1.0 - 1e-12) {
                    return Err(Error::InvalidModel(format!(
                        "E e_{j}^4 = {m} is below (E e_{j}^2)^2 = {}",
                        s * s
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks the model can serve as a regression error law: mean zero and
    /// positive definite second moments.
    pub fn ensure_error_model(&self) -> Result<()> {
        self.validate()?;
        let scale = self
            .second
            .diagonal()
            .iter()
            .fold(1.0_f64, |a, v| a.max(v.abs()));
        if self.mean.amax() > 1e-12 * scale.sqrt() {
            return Err(Error::InvalidModel(format!(
                "error law must have mean zero, got |mean| = {:e}",
                self.mean.amax()
            )));
        }
        let (eig, _) = sorted_eigen(&linalg::symmetrize(&self.second));
        let lo = eig[0];
        let hi = eig[eig.len() - 1];
        if lo <= 1e-12 * hi.max(f64::MIN_POSITIVE) {
            return Err(Error::NotPositiveDefinite(format!(
                "second-moment matrix has eigenvalue {lo:e}"
            )));
        }
        Ok(())
    }

    /// The finite-support law behind this model, if any.
    pub fn finite_support(&self) -> Option<&FiniteSupportDistribution> {
        self.source.as_deref()
    }

    /// Vector of `E e_j³` for independent models.
    pub fn mu3(&self) -> Option<&DVector<f64>> {
        match &self.third {
            ThirdMoments::Marginal { mu3 } => Some(mu3),
            _ => None,
        }
    }

    /// Full third-moment tensor, expanding the independent form when needed.
    pub fn third_tensor(&self) -> Option<ThirdMomentTensor> {
        match &self.third {
            ThirdMoments::Tensor(t) => Some(t.clone()),
            ThirdMoments::Marginal { mu3 } if self.n <= TENSOR_MAX_DIM => {
                Some(ThirdMomentTensor::from_independent(mu3))
            }
            _ => None,
        }
    }
}

/// Moments of `dist` by exact enumeration. Product laws keep the
/// independent layout.
pub fn moments_of(dist: &FiniteSupportDistribution) -> MomentModel {
    let n = dist.dim();
    let source = Some(Arc::new(dist.clone()));
    if let Some(margs) = dist.marginals() {
        let col = |r: i32| DVector::from_iterator(n, margs.iter().map(|m| m.moment(r)));
        return MomentModel {
            n,
            mean: col(1),
            second: DMatrix::from_diagonal(&col(2)),
            third: ThirdMoments::Marginal { mu3: col(3) },
            fourth_diag: Some(col(4).as_slice().to_vec()),
            independent: true,
            source,
        };
    }
    let mean = dist.mean();
    let second = dist.expectation(|v| {
        let outer = v * v.transpose();
        DVector::from_column_slice(outer.as_slice())
    });
    let second = linalg::symmetrize(&DMatrix::from_column_slice(n, n, second.as_slice()));
    let fourth = dist.expectation(|v| v.map(|x| x.powi(4)));
    let third = if n <= TENSOR_MAX_DIM {
        let raw = dist.expectation(|v| {
            let mut out = DVector::zeros(n * n * n);
            for j in 0..n {
                for l in 0..n {
                    let vjl = v[j] * v[l];
                    for m in 0..n {
                        out[(j * n + l) * n + m] = vjl * v[m];
                    }
                }
            }
            out
        });
        ThirdMoments::Tensor(ThirdMomentTensor {
            n,
            entries: raw.as_slice().to_vec(),
        })
    } else {
        ThirdMoments::Unavailable
    };
    MomentModel {
        n,
        mean,
        second,
        third,
        fourth_diag: Some(fourth.as_slice().to_vec()),
        independent: false,
        source,
    }
}

/// Mean and variance of `e'He`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadFormMoments {
    pub mean: f64,
    /// `None` when the model lacks fourth-moment information.
    pub variance: Option<f64>,
}

/// `E e'He = tr(H E ee')`; the variance comes from enumeration when the
/// model has finite support, otherwise from the independent-coordinates
/// formula when fourth moments are known.
pub fn quadratic_form_moments(h: &DMatrix<f64>, model: &MomentModel) -> Result<QuadFormMoments> {
    check_len("H", h.nrows(), model.n)?;
    let h = symmetrize_checked(h)?;
    let mean = linalg::trace_inner(&h, &model.second);
    let variance = if let Some(dist) = model.finite_support() {
        let m = dist.expectation_scalar(|v| quad_form(&h, v));
        Some(dist.expectation_scalar(|v| (quad_form(&h, v) - m).powi(2)))
    } else {
        match (&model.fourth_diag, model.independent) {
            (Some(m4), true) => {
                let mu2 = model.second.diagonal();
                Some(independent_quadratic_variance(
                    &h,
                    &mu2,
                    &DVector::from_column_slice(m4),
                ))
            }
            _ => None,
        }
    };
    Ok(QuadFormMoments { mean, variance })
}

/// `Var(e'He) = Σ_j h_jj²(μ4_j − μ2_j²) + 2 Σ_{j≠l} h_jl² μ2_j μ2_l` for
/// independent mean-zero coordinates and symmetric `H`.
pub fn independent_quadratic_variance(
    h: &DMatrix<f64>,
    mu2: &DVector<f64>,
    mu4: &DVector<f64>,
) -> f64 {
    let n = h.nrows();
    let diag = (0..n).map(|j| h[(j, j)].powi(2) * (mu4[j] - mu2[j] * mu2[j]));
    let off = (0..n).flat_map(|j| {
        (0..n)
            .filter(move |&l| l != j)
            .map(move |l| 2.0 * h[(j, l)].powi(2) * mu2[j] * mu2[l])
    });
    compensated_sum(diag.chain(off))
}
