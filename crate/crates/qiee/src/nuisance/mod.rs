//! Nuisance learners and the cross-fitting engine.
//!
//! Learners: binomial GLMs (logit or probit link, fractional responses
//! allowed), ridge least squares, an additive location-scale conditional CDF
//! with a kernel-smoothed residual law, and grid-interpolated CDF families.

mod cdf;
mod crossfit;
mod features;
mod glm;
mod grid;

pub use cdf::{fit_additive_cdf, ConditionalCdfModel, ResidualLaw};
pub use crossfit::{
    crossfit, fit_in_sample, outcome_grid, Column, Condition, Curves, FeatureSet, FittedNuisance,
    NuisanceRole, RoleTarget, RoleValues,
};
pub use features::{Basis, Expander, FeatureMatrix};
pub use glm::{
    fit_linear_glm, fit_logistic_glm, fit_probit_glm, BinaryProbModel, LinearModel, Link,
};
pub use grid::{fit_grid_cdf_family, grid_density, interpolate, NodeModel, ThetaIndexedCdfModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default probability clip.
pub const EPS_PS: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerKind {
    LogisticGlm,
    ProbitGlm,
    LinearGlm,
    AdditiveCdf,
    GridCdfFamily,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    /// 1.06 * sd * n^(-1/5).
    Silverman,
    Fixed(f64),
}

/// How the covariate block is presented to a learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateMap {
    #[default]
    Raw,
    /// The nonlinear transform used to emulate a wrong working model.
    Misspecified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    pub basis: Basis,
    pub ridge: f64,
    pub bandwidth: Bandwidth,
    pub n_grid: usize,
    /// Per-node learner of a grid family.
    pub node_kind: LearnerKind,
    /// Probability clip; only applied by probability roles.
    pub clip: f64,
    /// Monotone (isotonic) pass over node values of grid families.
    pub isotonic: bool,
    pub covariates: CovariateMap,
}

impl Default for LearnerSpec {
    fn default() -> Self {
        LearnerSpec {
            kind: LearnerKind::LogisticGlm,
            basis: Basis::default(),
            ridge: 0.0,
            bandwidth: Bandwidth::Silverman,
            n_grid: 100,
            node_kind: LearnerKind::ProbitGlm,
            clip: EPS_PS,
            isotonic: false,
            covariates: CovariateMap::Raw,
        }
    }
}

impl LearnerSpec {
    pub fn logistic() -> Self {
        LearnerSpec::default()
    }

    pub fn additive_cdf() -> Self {
        LearnerSpec {
            kind: LearnerKind::AdditiveCdf,
            ..LearnerSpec::default()
        }
    }

    pub fn grid_family(n_grid: usize) -> Self {
        LearnerSpec {
            kind: LearnerKind::GridCdfFamily,
            n_grid,
            ..LearnerSpec::default()
        }
    }

    pub fn misspecified(mut self) -> Self {
        self.covariates = CovariateMap::Misspecified;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.basis.degree < 1 {
            return Err(Error::Argument("basis degree must be >= 1".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Argument("ridge penalty must be >= 0".into()));
        }
        if self.kind == LearnerKind::GridCdfFamily && self.n_grid < 2 {
            return Err(Error::Argument("grid family needs n_grid >= 2".into()));
        }
        if !(0.0..0.5).contains(&self.clip) {
            return Err(Error::Argument("clip must lie in [0, 0.5)".into()));
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0) {
                return Err(Error::Argument("fixed bandwidth must be positive".into()));
            }
        }
        Ok(())
    }

    /// Parametric specs are the ones for which the bootstrap is justified.
    pub fn is_parametric(&self) -> bool {
        self.kind != LearnerKind::GridCdfFamily && self.basis.degree <= 2
    }

    pub fn describe(&self) -> String {
        let kind = match self.kind {
            LearnerKind::LogisticGlm => "logistic-glm",
            LearnerKind::ProbitGlm => "probit-glm",
            LearnerKind::LinearGlm => "linear-glm",
            LearnerKind::AdditiveCdf => "additive-cdf",
            LearnerKind::GridCdfFamily => "grid-cdf-family",
        };
        let cov = match self.covariates {
            CovariateMap::Raw => "raw",
            CovariateMap::Misspecified => "transformed",
        };
        let mut s = format!(
            "{kind}(degree={}{}, ridge={}, covariates={cov}",
            self.basis.degree,
            if self.basis.interactions { "+int" } else { "" },
            self.ridge
        );
        if self.kind == LearnerKind::GridCdfFamily {
            s.push_str(&format!(", n_grid={}", self.n_grid));
        }
        s.push(')');
        s
    }
}
