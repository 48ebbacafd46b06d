//! Quantiles of potential outcomes by inverse estimating equations (IEE) and
//! their debiased, influence-function-corrected version.
//!
//! A quantile theta of a potential outcome is identified through a moment
//! that is a CDF in theta: E[g(W, tau, theta, h)] = 0 at tau = q. The plug-in
//! IEE solves P_n[g] = 0 in theta; the debiased IEE solves P_n[g + phi] = 0,
//! where phi is the adjustment term that makes the score the efficient
//! influence function up to the normalizer B.
//!
//! Modules:
//! - [`dataset`]: unit table with semantic roles, CSV IO, fold assignment.
//! - [`nuisance`]: learners and cross-fitting.
//! - [`engine`]: score evaluation, root finding, B, orthogonality probe.
//! - [`estimands`]: QTE, quantile mediation, survivor quantiles, longitudinal regimens.
//! - [`inference`]: EIF and bootstrap SEs, Wald intervals, rearrangement.
//! - [`simlab`]: simulation designs, truths, Monte Carlo runner.

pub mod dataset;
pub mod engine;
pub mod error;
pub mod estimands;
pub mod inference;
mod math;
pub mod nuisance;
pub mod simlab;

pub use error::{Error, Result};
pub use math::{expit, norm_cdf, norm_pdf, norm_quantile, skewness};
