//! Variance comparisons between OLS and its quadratic perturbations
//! `β̂_α = β̂_OLS + α (y'H_i y)_i`, at `β = 0`.
//!
//! For a direction `c`, write `d = X(X'X)⁻¹c` and `G = Σ_i c_i H_i`. Then
//!
//! ```text
//! Var(c'β̂_α) = Var(c'β̂_OLS) + 2α Cov(d'e, e'Ge) + α² Var(e'Ge)
//! ```
//!
//! and the covariance depends only on third moments of the errors. A
//! nonzero covariance lets some `α` beat OLS; the best choice is
//! `α* = -Cov/Var(e'Ge)`, improving the variance by `Cov²/Var(e'Ge)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::koopmann::{
    make_perturbed_ols, random_identity_covariance_law, solve_h_space, QuadraticEstimator,
};
use crate::linalg::{self, quad_form};
use crate::moments::{
    moments_of, quadratic_form_moments, ErrorLaw, MomentModel, SkewedTwoPoint, ThirdMomentTensor,
    ThirdMoments, ENUMERATION_CAP,
};
use crate::regress::{check_len, DesignMatrix};
use crate::sim::{derive_seed, stream_rng, VarianceSimulation};
use crate::{io, Error, Result};

/// Quadratic parts with variance at or below this are treated as zero.
pub const DEGENERATE_QUAD_VAR: f64 = 1e-14;
/// Candidates with `|cov_term|` at or below this do not count as found.
pub const NOT_FOUND_THRESHOLD: f64 = 1e-10;
/// Skew weight of the default two-point error law (`E e³ = 1.5`).
pub const DEFAULT_SKEW_P: f64 = 0.2;
/// Support size up to which search candidates are cross-checked by enumeration.
pub const SEARCH_ENUMERATION_LIMIT: usize = 1 << 12;
/// Relative agreement required between formulas and enumeration.
pub const CROSS_CHECK_TOL: f64 = 1e-9;

/// `G = Σ_i c_i H_i`.
pub fn combine_h(c: &DVector<f64>, h: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    check_len("H list", h.len(), c.len())?;
    let n = h.first().map_or(0, |m| m.nrows());
    let g = h
        .iter()
        .zip(c.iter())
        .fold(DMatrix::zeros(n, n), |acc, (hi, ci)| acc + hi * *ci);
    Ok(linalg::symmetrize(&g))
}

fn check_h(design: &DesignMatrix, h: &[DMatrix<f64>]) -> Result<()> {
    check_len("H list", h.len(), design.k())?;
    for hi in h {
        if hi.shape() != (design.n(), design.n()) {
            return Err(Error::DimensionMismatch(format!(
                "H_i is {}x{}, expected {n}x{n}",
                hi.nrows(),
                hi.ncols(),
                n = design.n()
            )));
        }
    }
    Ok(())
}

/// `Cov(c'β̂_OLS, c'(y'H_i y)_i) = Σ_{j,l,m} d_j G_lm E(e_j e_l e_m)` for
/// mean-zero errors and `β = 0`.
pub fn cov_general(
    c: &DVector<f64>,
    h: &[DMatrix<f64>],
    design: &DesignMatrix,
    third: &ThirdMomentTensor,
) -> Result<f64> {
    check_h(design, h)?;
    check_len("third-moment tensor", third.dim(), design.n())?;
    let d = design.ols_weights(c)?;
    let g = combine_h(c, h)?;
    let n = design.n();
    let terms = (0..n).flat_map(|j| {
        let (d, g) = (&d, &g);
        (0..n).flat_map(move |l| (0..n).map(move |m| d[j] * g[(l, m)] * third.get(j, l, m)))
    });
    Ok(linalg::compensated_sum(terms))
}

/// The same covariance for independent coordinates:
/// `Σ_j d_j G_jj E(e_j³)`.
pub fn cov_independent(
    c: &DVector<f64>,
    h: &[DMatrix<f64>],
    design: &DesignMatrix,
    mu3: &DVector<f64>,
) -> Result<f64> {
    check_h(design, h)?;
    check_len("mu3", mu3.len(), design.n())?;
    let d = design.ols_weights(c)?;
    let g = combine_h(c, h)?;
    Ok(linalg::compensated_sum(
        (0..design.n()).map(|j| d[j] * g[(j, j)] * mu3[j]),
    ))
}

/// Moments of `Var(c'β̂_α)` recomputed by summing over the support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnumerationCheck {
    /// The `β` at which the data were generated.
    #[serde(with = "io::serde_vector")]
    pub beta: DVector<f64>,
    pub var_ols: f64,
    pub cov_term: f64,
    pub quad_var: f64,
    pub var_alpha_star: f64,
    /// Whether the enumerated values agree with the formulas.
    pub consistent: bool,
}

/// Result of a variance comparison along direction `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    #[serde(with = "io::serde_vector")]
    pub c: DVector<f64>,
    pub cov_term: f64,
    pub quad_var: f64,
    pub alpha_star: f64,
    pub var_ols: f64,
    pub var_alpha_star: f64,
    pub improvement: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_confirmation: Option<VarianceSimulation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enumeration_check: Option<EnumerationCheck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ComparisonReport {
    /// `var_ols + 2α cov_term + α² quad_var` for any `α`.
    pub fn variance_at(&self, alpha: f64) -> f64 {
        self.var_ols + 2.0 * alpha * self.cov_term + alpha * alpha * self.quad_var
    }
}

fn cov_term_for(
    c: &DVector<f64>,
    h: &[DMatrix<f64>],
    design: &DesignMatrix,
    model: &MomentModel,
) -> Result<f64> {
    match (&model.third, model.finite_support()) {
        (ThirdMoments::Marginal { mu3 }, _) if model.independent => {
            cov_independent(c, h, design, mu3)
        }
        (ThirdMoments::Tensor(t), _) => cov_general(c, h, design, t),
        (_, Some(dist)) => {
            let d = design.ols_weights(c)?;
            let g = combine_h(c, h)?;
            Ok(dist.expectation_scalar(|e| d.dot(e) * quad_form(&g, e)))
        }
        _ => Err(Error::InvalidModel("third moments are unavailable".into())),
    }
}

fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Finds the variance-minimising `α` for `β̂_OLS + α (y'H_i y)_i` along
/// `c`, using the analytic formulas at `β = 0`. When the model has finite
/// support every term is re-derived by enumeration and recorded in
/// [`ComparisonReport::enumeration_check`].
pub fn optimize_alpha(
    c: &DVector<f64>,
    h: &[DMatrix<f64>],
    design: &DesignMatrix,
    model: &MomentModel,
) -> Result<ComparisonReport> {
    optimize_alpha_at_beta(c, h, design, model, &DVector::zeros(design.k()))
}

/// [`optimize_alpha`] for data generated at a nonzero `β`. The formulas are
/// applied to the recentred errors; the enumeration check is run at the
/// actual `β` and flags the report inconsistent when recentring changes the
/// variances (it does whenever `X'G ≠ 0`, because `q(Xβ + e)` picks up the
/// term `2β'X'Ge`).
pub fn optimize_alpha_at_beta(
    c: &DVector<f64>,
    h: &[DMatrix<f64>],
    design: &DesignMatrix,
    model: &MomentModel,
    beta: &DVector<f64>,
) -> Result<ComparisonReport> {
    check_h(design, h)?;
    check_len("c", c.len(), design.k())?;
    check_len("beta", beta.len(), design.k())?;
    check_len("error model", model.n, design.n())?;
    model.ensure_error_model()?;

    let d = design.ols_weights(c)?;
    let g = combine_h(c, h)?;
    let var_ols = d.dot(&(&model.second * &d));
    let cov_term = cov_term_for(c, h, design, model)?;
    let quad_var = quadratic_form_moments(&g, model)?
        .variance
        .ok_or(Error::FourthMomentsUnavailable)?;

    let (alpha_star, improvement, note) = if quad_var <= DEGENERATE_QUAD_VAR {
        (
            0.0,
            0.0,
            Some("degenerate quadratic part: Var(c'q) <= 1e-14, alpha* set to 0".to_string()),
        )
    } else {
        // + 0.0 turns -0.0 into 0.0
        (
            -cov_term / quad_var + 0.0,
            cov_term * cov_term / quad_var,
            None,
        )
    };
    let var_alpha_star = var_ols + 2.0 * alpha_star * cov_term + alpha_star * alpha_star * quad_var;

    let enumeration_check = match model.finite_support() {
        Some(dist) => {
            let shifted = dist.shifted(&(design.matrix() * beta))?;
            let cb = c.dot(beta);
            let lin = |y: &DVector<f64>| d.dot(y) - cb;
            let quad = |y: &DVector<f64>| quad_form(&g, y);
            let mean_q = shifted.expectation_scalar(quad);
            let e_var_ols = shifted.expectation_scalar(|y| lin(y).powi(2));
            let e_cov = shifted.expectation_scalar(|y| lin(y) * (quad(y) - mean_q));
            let e_quad = shifted.expectation_scalar(|y| (quad(y) - mean_q).powi(2));
            let e_var_alpha =
                shifted.expectation_scalar(|y| (lin(y) + alpha_star * (quad(y) - mean_q)).powi(2));
            let consistent = [
                (e_var_ols, var_ols),
                (e_cov, cov_term),
                (e_quad, quad_var),
                (e_var_alpha, var_alpha_star),
            ]
            .iter()
            .all(|&(a, b)| relative_gap(a, b) <= CROSS_CHECK_TOL);
            Some(EnumerationCheck {
                beta: beta.clone(),
                var_ols: e_var_ols,
                cov_term: e_cov,
                quad_var: e_quad,
                var_alpha_star: e_var_alpha,
                consistent,
            })
        }
        None => None,
    };

    Ok(ComparisonReport {
        c: c.clone(),
        cov_term,
        quad_var,
        alpha_star,
        var_ols,
        var_alpha_star,
        improvement,
        mc_confirmation: None,
        enumeration_check,
        note,
    })
}

/// A design, a perturbed OLS estimator at `α*`, and the error law under
/// which it beats OLS along `c`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Counterexample {
    pub design: DesignMatrix,
    pub estimator: QuadraticEstimator,
    pub law: ErrorLaw,
    pub report: ComparisonReport,
}

impl Counterexample {
    pub fn c(&self) -> &DVector<f64> {
        &self.report.c
    }
}

/// Moment model for `law`, enumerated from the explicit support when it
/// has at most `limit` points.
pub fn model_for_law(law: &ErrorLaw, limit: usize) -> Result<MomentModel> {
    let size: u128 = match law {
        ErrorLaw::Independent { marginals } => marginals
            .iter()
            .map(|m| m.values().len() as u128)
            .try_fold(1_u128, |a, b| a.checked_mul(b))
            .unwrap_or(u128::MAX),
        ErrorLaw::Joint { distribution } => distribution.len() as u128,
    };
    if size <= limit as u128 {
        Ok(moments_of(&law.to_finite_support()?))
    } else {
        law.moment_model()
    }
}

fn build(
    design: DesignMatrix,
    h: Vec<DMatrix<f64>>,
    c: DVector<f64>,
    law: ErrorLaw,
    limit: usize,
) -> Result<Counterexample> {
    let model = model_for_law(&law, limit)?;
    let report = optimize_alpha(&c, &h, &design, &model)?;
    let estimator = make_perturbed_ols(&design, h, report.alpha_star)?;
    Ok(Counterexample {
        design,
        estimator,
        law,
        report,
    })
}

/// Location model with `H_1 = diag(1, -1, 0, ..., 0)`, `c = 1`, `e_1` a
/// unit-variance two-point law with `E e_1³ = gamma` and the remaining
/// errors `±1` with equal probability.
pub fn example_ex1(n: usize, gamma: f64) -> Result<Counterexample> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need n >= 2, got {n}")));
    }
    let design = DesignMatrix::location(n)?;
    let mut diag = DVector::zeros(n);
    diag[0] = 1.0;
    diag[1] = -1.0;
    let h = vec![DMatrix::from_diagonal(&diag)];
    let symmetric = SkewedTwoPoint::symmetric(1.0)?.marginal();
    let mut marginals = vec![symmetric; n];
    marginals[0] = SkewedTwoPoint::with_third_moment(1.0, gamma)?.marginal();
    build(
        design,
        h,
        DVector::from_element(1, 1.0),
        ErrorLaw::Independent { marginals },
        ENUMERATION_CAP,
    )
}

/// The block matrix `diag([[1,-1],[-1,1]], [[-1,1],[1,-1]])`.
pub fn ex2_h() -> DMatrix<f64> {
    let mut h = DMatrix::zeros(4, 4);
    for (r, c, v) in [
        (0, 0, 1.0),
        (0, 1, -1.0),
        (1, 0, -1.0),
        (1, 1, 1.0),
        (2, 2, -1.0),
        (2, 3, 1.0),
        (3, 2, 1.0),
        (3, 3, -1.0),
    ] {
        h[(r, c)] = v;
    }
    h
}

/// Balanced one-way layout (`k = 2`, `n = 4`) with `H_1 = H_2 =`
/// [`ex2_h`], `c = (1, 0)'` and i.i.d. errors from the default skewed
/// two-point law.
pub fn example_ex2() -> Result<Counterexample> {
    example_ex2_with(&SkewedTwoPoint::new(1.0, DEFAULT_SKEW_P)?)
}

/// [`example_ex2`] with i.i.d. errors distributed as `base`.
pub fn example_ex2_with(base: &SkewedTwoPoint) -> Result<Counterexample> {
    let design = DesignMatrix::one_way(2, 2)?;
    build(
        design,
        vec![ex2_h(), ex2_h()],
        DVector::from_vec(vec![1.0, 0.0]),
        ErrorLaw::iid(base, 4),
        ENUMERATION_CAP,
    )
}

/// How [`search_counterexample`] picks error laws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// i.i.d. skewed errors; needs `Σ_j d_j G_jj ≠ 0`.
    #[serde(rename = "rule-i")]
    RuleI,
    /// One skewed coordinate `j0`, the rest symmetric; needs `d_j0 G_j0j0 ≠ 0`.
    #[serde(rename = "rule-ii")]
    RuleII,
    /// Correlated skewed laws with covariance `I`, via the full third-moment tensor.
    #[serde(rename = "tensor")]
    Tensor,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rule-i" => Ok(Self::RuleI),
            "rule-ii" => Ok(Self::RuleII),
            "tensor" => Ok(Self::Tensor),
            other => Err(Error::InvalidArgument(format!(
                "unknown strategy `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RuleI => "rule-i",
            Self::RuleII => "rule-ii",
            Self::Tensor => "tensor",
        })
    }
}

/// Knobs for [`search_counterexample`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub budget: usize,
    pub seed: u64,
    /// Skew weight `p` of the two-point laws.
    pub skew_p: f64,
    /// Force every error law to be symmetric.
    pub symmetric: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            budget: 100,
            seed: crate::sim::DEFAULT_SEED,
            skew_p: DEFAULT_SKEW_P,
            symmetric: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum SearchOutcome {
    Found {
        candidate: usize,
        candidates_evaluated: usize,
        counterexample: Box<Counterexample>,
    },
    NotFound {
        candidates_evaluated: usize,
        max_abs_cov: f64,
    },
}

fn random_unit<R: Rng + ?Sized>(k: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-8 {
            return v / norm;
        }
    }
}

/// Randomised search for a perturbation, direction and error law that
/// beat OLS. Candidate `t` draws from stream `t`, so the result does not
/// depend on evaluation order; the best improvement wins, ties going to the
/// lowest candidate index.
pub fn search_counterexample(
    design: &DesignMatrix,
    strategy: Strategy,
    opts: &SearchOptions,
) -> Result<SearchOutcome> {
    if opts.budget == 0 {
        return Err(Error::InvalidArgument("budget must be at least 1".into()));
    }
    let basis = solve_h_space(design)?;
    if basis.dim == 0 {
        return Ok(SearchOutcome::NotFound {
            candidates_evaluated: 0,
            max_abs_cov: 0.0,
        });
    }
    let p = if opts.symmetric { 0.5 } else { opts.skew_p };
    let skewed = SkewedTwoPoint::new(1.0, p)?;
    let symmetric = SkewedTwoPoint::symmetric(1.0)?;
    let (n, k) = (design.n(), design.k());
    let seed = derive_seed(opts.seed, "search_counterexample");

    let candidate = |t: usize| -> Result<Counterexample> {
        let mut rng = stream_rng(seed, t as u64);
        let h: Vec<DMatrix<f64>> = if t % 2 == 1 {
            let common = basis.random_element(&mut rng);
            vec![&common / common.norm(); k]
        } else {
            (0..k)
                .map(|_| {
                    let m = basis.random_element(&mut rng);
                    &m / m.norm()
                })
                .collect()
        };
        let c = random_unit(k, &mut rng);
        let law = match strategy {
            Strategy::RuleI => ErrorLaw::iid(&skewed, n),
            Strategy::RuleII => {
                let d = design.ols_weights(&c)?;
                let g = combine_h(&c, &h)?;
                let j0 = (0..n)
                    .map(|j| (j, (d[j] * g[(j, j)]).abs()))
                    .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc })
                    .0;
                let mut marginals = vec![symmetric.marginal(); n];
                marginals[j0] = skewed.marginal();
                ErrorLaw::Independent { marginals }
            }
            Strategy::Tensor => ErrorLaw::Joint {
                distribution: random_identity_covariance_law(n, !opts.symmetric, &mut rng)?,
            },
        };
        build(design.clone(), h, c, law, SEARCH_ENUMERATION_LIMIT)
    };

    let results: Vec<Result<Counterexample>> =
        (0..opts.budget).into_par_iter().map(candidate).collect();

    let mut best: Option<(usize, Counterexample)> = None;
    let mut max_abs_cov = 0.0_f64;
    for (t, r) in results.into_iter().enumerate() {
        let cand = r?;
        let cov = cand.report.cov_term.abs();
        max_abs_cov = max_abs_cov.max(cov);
        if cov <= NOT_FOUND_THRESHOLD {
            continue;
        }
        let better = best
            .as_ref()
            .is_none_or(|(_, b)| cand.report.improvement > b.report.improvement);
        if better {
            best = Some((t, cand));
        }
    }
    Ok(match best {
        Some((t, cand)) => SearchOutcome::Found {
            candidate: t,
            candidates_evaluated: opts.budget,
            counterexample: Box::new(cand),
        },
        None => SearchOutcome::NotFound {
            candidates_evaluated: opts.budget,
            max_abs_cov,
        },
    })
}
