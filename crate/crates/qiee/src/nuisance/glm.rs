//! Ridge-penalized GLMs fitted by IRLS / Fisher scoring.

use nalgebra::{DMatrix, DVector};

use super::features::{Expander, FeatureMatrix};
use super::{LearnerKind, LearnerSpec};
use crate::error::{Error, Result};
use crate::math::{expit, norm_cdf, norm_pdf};

const MAX_ITER: usize = 100;
/// Relative change in the penalized log-likelihood treated as converged.
const DEV_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-8;
const MU_EPS: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Logit,
    Probit,
}

impl Link {
    fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Logit => expit(eta),
            Link::Probit => norm_cdf(eta),
        }
    }

    fn derivative(self, eta: f64, mu: f64) -> f64 {
        match self {
            Link::Logit => mu * (1.0 - mu),
            Link::Probit => norm_pdf(eta),
        }
    }
}

/// Binomial GLM with clipped predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryProbModel {
    expander: Expander,
    beta: Vec<f64>,
    link: Link,
    clip: f64,
    pub iterations: usize,
    pub n_train: usize,
}

impl BinaryProbModel {
    pub fn coefficients(&self) -> &[f64] {
        &self.beta
    }

    pub fn predict_row(&self, raw: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.beta.len()];
        self.predict_with(raw, &mut buf)
    }

    fn predict_with(&self, raw: &[f64], buf: &mut [f64]) -> f64 {
        self.expander.expand_row(raw, buf);
        let eta: f64 = buf.iter().zip(&self.beta).map(|(a, b)| a * b).sum();
        self.link.inverse(eta).clamp(self.clip, 1.0 - self.clip)
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Vec<f64> {
        let mut buf = vec![0.0; self.beta.len()];
        (0..x.rows())
            .map(|i| self.predict_with(x.row(i), &mut buf))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    expander: Expander,
    beta: Vec<f64>,
    pub n_train: usize,
}

impl LinearModel {
    pub fn predict_row(&self, raw: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.beta.len()];
        self.expander.expand_row(raw, &mut buf);
        buf.iter().zip(&self.beta).map(|(a, b)| a * b).sum()
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Vec<f64> {
        (0..x.rows()).map(|i| self.predict_row(x.row(i))).collect()
    }
}

fn check_inputs(x: &FeatureMatrix, y: &[f64]) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::Argument(
            "features and responses differ in length".into(),
        ));
    }
    if x.rows() == 0 {
        return Err(Error::SampleSize { needed: 1, got: 0 });
    }
    if (0..x.rows()).any(|i| x.row(i).iter().any(|v| !v.is_finite())) {
        return Err(Error::Argument("non-finite feature value".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("non-finite response".into()));
    }
    Ok(())
}

/// Logistic regression on {0,1} labels.
pub fn fit_logistic_glm(
    x: &FeatureMatrix,
    labels: &[f64],
    spec: &LearnerSpec,
) -> Result<BinaryProbModel> {
    check_inputs(x, labels)?;
    if labels.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Argument("logistic labels must be 0 or 1".into()));
    }
    fit_binomial(x, labels, spec, Link::Logit, spec.clip)
}

/// Probit regression; responses may be fractional in [0, 1].
pub fn fit_probit_glm(x: &FeatureMatrix, y: &[f64], spec: &LearnerSpec) -> Result<BinaryProbModel> {
    check_inputs(x, y)?;
    if y.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Argument(
            "probit responses must lie in [0, 1]".into(),
        ));
    }
    fit_binomial(x, y, spec, Link::Probit, spec.clip)
}

pub(crate) fn fit_binary(
    x: &FeatureMatrix,
    y: &[f64],
    spec: &LearnerSpec,
    kind: LearnerKind,
    clip: f64,
) -> Result<BinaryProbModel> {
    fit_binary_from(x, y, spec, kind, clip, None)
}

/// As [`fit_binary`], starting IRLS from `warm` when it beats the
/// intercept-only start.
pub(crate) fn fit_binary_from(
    x: &FeatureMatrix,
    y: &[f64],
    spec: &LearnerSpec,
    kind: LearnerKind,
    clip: f64,
    warm: Option<&[f64]>,
) -> Result<BinaryProbModel> {
    check_inputs(x, y)?;
    let link = match kind {
        LearnerKind::ProbitGlm => Link::Probit,
        _ => Link::Logit,
    };
    fit_binomial_from(x, y, spec, link, clip, warm)
}

fn fit_binomial(
    x: &FeatureMatrix,
    y: &[f64],
    spec: &LearnerSpec,
    link: Link,
    clip: f64,
) -> Result<BinaryProbModel> {
    fit_binomial_from(x, y, spec, link, clip, None)
}

fn fit_binomial_from(
    x: &FeatureMatrix,
    y: &[f64],
    spec: &LearnerSpec,
    link: Link,
    clip: f64,
    warm: Option<&[f64]>,
) -> Result<BinaryProbModel> {
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    if ybar <= 0.0 || ybar >= 1.0 {
        return Err(Error::DegenerateLabels(format!(
            "all responses equal {ybar}"
        )));
    }
    let expander = Expander::fit(&spec.basis, x);
    let design = expander.design(x);
    let (beta, iterations) = irls(&design, y, link, spec.ridge, warm)?;
    let binary = y.iter().all(|&v| v == 0.0 || v == 1.0);
    if binary && spec.ridge == 0.0 {
        let eta = &design * DVector::from_column_slice(&beta);
        let perfect = eta
            .iter()
            .zip(y)
            .all(|(&e, &yy)| (link.inverse(e) - yy).abs() < 1e-6);
        if perfect {
            return Err(Error::Convergence(
                "complete separation: the likelihood has no finite maximizer".into(),
            ));
        }
    }
    Ok(BinaryProbModel {
        expander,
        beta,
        link,
        clip,
        iterations,
        n_train: y.len(),
    })
}

fn penalized_loglik(
    design: &DMatrix<f64>,
    y: &[f64],
    beta: &DVector<f64>,
    link: Link,
    ridge: f64,
) -> f64 {
    let eta = design * beta;
    let n = y.len() as f64;
    let ll: f64 = eta
        .iter()
        .zip(y)
        .map(|(&e, &yy)| {
            let mu = link.inverse(e).clamp(MU_EPS, 1.0 - MU_EPS);
            yy * mu.ln() + (1.0 - yy) * (1.0 - mu).ln()
        })
        .sum();
    let pen: f64 = beta.iter().skip(1).map(|b| b * b).sum();
    ll / n - 0.5 * ridge * pen
}

fn irls(
    design: &DMatrix<f64>,
    y: &[f64],
    link: Link,
    ridge: f64,
    warm: Option<&[f64]>,
) -> Result<(Vec<f64>, usize)> {
    let (n, p) = design.shape();
    let nf = n as f64;
    let ybar = (y.iter().sum::<f64>() / nf).clamp(1e-6, 1.0 - 1e-6);
    let mut beta = DVector::zeros(p);
    beta[0] = match link {
        Link::Logit => (ybar / (1.0 - ybar)).ln(),
        Link::Probit => crate::math::norm_quantile(ybar),
    };
    let mut obj = penalized_loglik(design, y, &beta, link, ridge);
    if let Some(w) = warm.filter(|w| w.len() == p) {
        let cand = DVector::from_column_slice(w);
        let cand_obj = penalized_loglik(design, y, &cand, link, ridge);
        if cand_obj.is_finite() && cand_obj > obj {
            beta = cand;
            obj = cand_obj;
        }
    }
    let mut wx = DMatrix::zeros(n, p);
    for iter in 0..MAX_ITER {
        let eta = design * &beta;
        let mut resid = DVector::zeros(n);
        for i in 0..n {
            let e = eta[i];
            let mu = link.inverse(e).clamp(MU_EPS, 1.0 - MU_EPS);
            let d = link.derivative(e, mu);
            let var = mu * (1.0 - mu);
            resid[i] = (y[i] - mu) * d / var;
            let w = d * d / var;
            for j in 0..p {
                wx[(i, j)] = design[(i, j)] * w;
            }
        }
        let mut grad = design.tr_mul(&resid) / nf;
        for j in 1..p {
            grad[j] -= ridge * beta[j];
        }
        if grad.norm() <= GRAD_TOL {
            return Ok((beta.iter().copied().collect(), iter));
        }
        let mut info = design.tr_mul(&wx) / nf;
        for j in 1..p {
            info[(j, j)] += ridge;
        }
        let step = solve_spd(info, &grad)
            .ok_or_else(|| Error::Convergence("singular information matrix".into()))?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + &step * t;
            let cand_obj = penalized_loglik(design, y, &cand, link, ridge);
            if cand_obj.is_finite() && cand_obj >= obj - 1e-12 * obj.abs() {
                let gain = cand_obj - obj;
                beta = cand;
                obj = cand_obj;
                accepted = true;
                if gain.abs() < DEV_TOL * (obj.abs() + 0.1) {
                    return Ok((beta.iter().copied().collect(), iter + 1));
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::Convergence(
                "step halving failed to improve the likelihood".into(),
            ));
        }
    }
    Err(Error::Convergence(format!(
        "no convergence in {MAX_ITER} iterations"
    )))
}

fn solve_spd(mut a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(b));
    }
    let jitter = 1e-10 * a.diagonal().amax().max(1e-300);
    for j in 0..a.nrows() {
        a[(j, j)] += jitter;
    }
    a.cholesky().map(|ch| ch.solve(b))
}

/// Ridge least squares (intercept unpenalized).
pub fn fit_linear_glm(x: &FeatureMatrix, y: &[f64], spec: &LearnerSpec) -> Result<LinearModel> {
    check_inputs(x, y)?;
    let expander = Expander::fit(&spec.basis, x);
    let design = expander.design(x);
    let beta = least_squares(&design, y, spec.ridge)?;
    Ok(LinearModel {
        expander,
        beta,
        n_train: y.len(),
    })
}

pub(crate) fn least_squares(design: &DMatrix<f64>, y: &[f64], ridge: f64) -> Result<Vec<f64>> {
    let nf = design.nrows() as f64;
    let mut xtx = design.tr_mul(design) / nf;
    for j in 1..xtx.ncols() {
        xtx[(j, j)] += ridge;
    }
    let xty = design.tr_mul(&DVector::from_column_slice(y)) / nf;
    solve_spd(xtx, &xty)
        .map(|b| b.iter().copied().collect())
        .ok_or_else(|| Error::Convergence("singular least-squares system".into()))
}

pub(crate) fn linear_from_parts(expander: Expander, beta: Vec<f64>, n_train: usize) -> LinearModel {
    LinearModel {
        expander,
        beta,
        n_train,
    }
}

/// Constant-probability model used when a stratum has a single label.
pub(crate) fn constant_binary(x: &FeatureMatrix, p: f64, clip: f64) -> BinaryProbModel {
    let expander = Expander::intercept_only();
    let eta = if p >= 1.0 {
        40.0
    } else if p <= 0.0 {
        -40.0
    } else {
        (p / (1.0 - p)).ln()
    };
    BinaryProbModel {
        expander,
        beta: vec![eta],
        link: Link::Logit,
        clip,
        iterations: 0,
        n_train: x.rows(),
    }
}
