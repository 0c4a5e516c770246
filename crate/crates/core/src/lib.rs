//! Linear-plus-quadratic unbiased estimators for the fixed-design linear
//! model `y = Xβ + e`.
//!
//! The crate is organised bottom-up:
//!
//! - [`regress`]: design matrices, OLS/GLS, linear estimators and Loewner
//!   order comparisons.
//! - [`moments`]: error laws described by moments or by finite support, with
//!   exact expectations of linear and quadratic forms.
//! - [`koopmann`]: the space of quadratic perturbations `H` with
//!   `tr(H) = 0` and `X'HX = 0`, quadratic estimators built from it, and
//!   analytic diagnostics.
//! - [`lab`]: covariance/variance formulas for `β̂_OLS + α·(y'H_i y)_i`, the
//!   variance-optimal `α`, the two worked counterexamples and a randomized
//!   search for more.
//! - [`refuter`]: finite-support probe distributions that test black-box
//!   estimators for oddness, additivity, homogeneity and unbiasedness.
//! - [`sim`]: counter-based random streams and Monte Carlo confirmation.
//! - [`io`]: CSV/JSON matrix input and the JSON helpers used by the CLI.

pub mod error;
pub mod io;
pub mod koopmann;
pub mod lab;
pub mod moments;
pub mod refuter;
pub mod regress;
pub mod sim;

mod linalg;

pub use error::{Error, Result};

/// Version tag written into every JSON document.
pub const SCHEMA_VERSION: u32 = 1;
