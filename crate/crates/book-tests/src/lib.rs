//! Compiles the guide's code blocks as doctests so they track the API.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/linear-estimators.md")]
pub mod linear_estimators {}
#[doc = include_str!("../../../book/src/error-laws.md")]
pub mod error_laws {}
#[doc = include_str!("../../../book/src/quadratic-perturbations.md")]
pub mod quadratic_perturbations {}
#[doc = include_str!("../../../book/src/beating-ols.md")]
pub mod beating_ols {}
#[doc = include_str!("../../../book/src/refuting-unbiasedness.md")]
pub mod refuting_unbiasedness {}
#[doc = include_str!("../../../book/src/reproducibility.md")]
pub mod reproducibility {}
