//! Additive location-scale conditional CDF: Y = m(x) + sqrt(v(x)) * e, with
//! the law of e estimated by a Gaussian-kernel smoothed empirical CDF.
//!
//! The smoothed CDF is tabulated once per fit and evaluated by monotone cubic
//! Hermite interpolation, so that repeated solver queries cost O(1) per unit.
//! The reported density is the exact derivative of the interpolant.

use std::sync::Arc;

use super::features::{Expander, FeatureMatrix};
use super::glm::{least_squares, linear_from_parts, LinearModel};
use super::{Bandwidth, LearnerSpec};
use crate::error::{Error, Result};
use crate::math::{norm_cdf, norm_pdf, variance};

const TABLE_NODES: usize = 256;
const TABLE_REACH: f64 = 8.0;
pub const MIN_ROWS: usize = 20;
/// Variance floor as a fraction of the mean squared residual.
pub const REL_VAR_FLOOR: f64 = 0.05;

/// Law of the standardized residual.
#[derive(Debug, Clone, PartialEq)]
pub enum ResidualLaw {
    Gaussian,
    /// Uniform on (0, 1); used by oracle nuisances of the null design.
    Uniform01,
    Kernel(KernelTable),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelTable {
    lo: f64,
    step: f64,
    values: Vec<f64>,
    slopes: Vec<f64>,
    pub bandwidth: f64,
}

impl KernelTable {
    fn build(residuals: &[f64], h: f64) -> Self {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for &e in residuals {
            min = min.min(e);
            max = max.max(e);
        }
        let lo = min - TABLE_REACH * h;
        let hi = max + TABLE_REACH * h;
        let step = (hi - lo) / (TABLE_NODES - 1) as f64;
        let inv_n = 1.0 / residuals.len() as f64;
        let mut values = Vec::with_capacity(TABLE_NODES);
        let mut slopes = Vec::with_capacity(TABLE_NODES);
        for k in 0..TABLE_NODES {
            let z = lo + step * k as f64;
            let (mut f, mut d) = (0.0, 0.0);
            for &e in residuals {
                let u = (z - e) / h;
                f += norm_cdf(u);
                d += norm_pdf(u);
            }
            values.push(f * inv_n);
            slopes.push(d * inv_n / h);
        }
        values[0] = 0.0;
        values[TABLE_NODES - 1] = 1.0;
        // kernel sums can dip by rounding near the tails
        for k in 1..TABLE_NODES {
            values[k] = values[k].max(values[k - 1]).min(1.0);
        }
        // Fritsch-Carlson limiter keeps the interpolant monotone
        for k in 0..TABLE_NODES - 1 {
            let secant = (values[k + 1] - values[k]) / step;
            if secant <= 0.0 {
                slopes[k] = 0.0;
                slopes[k + 1] = 0.0;
                continue;
            }
            let a = slopes[k] / secant;
            let b = slopes[k + 1] / secant;
            let r = a * a + b * b;
            if r > 9.0 {
                let t = 3.0 / r.sqrt();
                slopes[k] = t * a * secant;
                slopes[k + 1] = t * b * secant;
            }
        }
        KernelTable {
            lo,
            step,
            values,
            slopes,
            bandwidth: h,
        }
    }

    fn locate(&self, z: f64) -> Option<(usize, f64)> {
        let pos = (z - self.lo) / self.step;
        if !(pos >= 0.0) || pos >= (TABLE_NODES - 1) as f64 {
            return None;
        }
        let k = pos as usize;
        Some((k, pos - k as f64))
    }

    fn cdf(&self, z: f64) -> f64 {
        match self.locate(z) {
            None => {
                if z < self.lo {
                    0.0
                } else {
                    1.0
                }
            }
            Some((k, t)) => {
                let (v0, v1) = (self.values[k], self.values[k + 1]);
                let rise = v1 - v0;
                if rise <= 0.0 {
                    return v0;
                }
                // Hermite form written as v0 + rise * w so that rounding
                // cannot break monotonicity when v0 and v1 are both near 1.
                let (t2, t3) = (t * t, t * t * t);
                let h10 = t3 - 2.0 * t2 + t;
                let h01 = -2.0 * t3 + 3.0 * t2;
                let h11 = t3 - t2;
                let w = h01 + self.step * (h10 * self.slopes[k] + h11 * self.slopes[k + 1]) / rise;
                (v0 + rise * w.clamp(0.0, 1.0)).clamp(v0, v1)
            }
        }
    }

    fn pdf(&self, z: f64) -> f64 {
        match self.locate(z) {
            None => 0.0,
            Some((k, t)) => {
                let t2 = t * t;
                let d00 = (6.0 * t2 - 6.0 * t) / self.step;
                let d10 = 3.0 * t2 - 4.0 * t + 1.0;
                let d01 = (-6.0 * t2 + 6.0 * t) / self.step;
                let d11 = 3.0 * t2 - 2.0 * t;
                let d = d00 * self.values[k]
                    + d10 * self.slopes[k]
                    + d01 * self.values[k + 1]
                    + d11 * self.slopes[k + 1];
                d.max(0.0)
            }
        }
    }
}

impl ResidualLaw {
    pub fn cdf(&self, z: f64) -> f64 {
        match self {
            ResidualLaw::Gaussian => norm_cdf(z),
            ResidualLaw::Uniform01 => z.clamp(0.0, 1.0),
            ResidualLaw::Kernel(t) => t.cdf(z),
        }
    }

    pub fn pdf(&self, z: f64) -> f64 {
        match self {
            ResidualLaw::Gaussian => norm_pdf(z),
            ResidualLaw::Uniform01 => {
                if (0.0..=1.0).contains(&z) {
                    1.0
                } else {
                    0.0
                }
            }
            ResidualLaw::Kernel(t) => t.pdf(z),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalCdfModel {
    mean: LinearModel,
    var: LinearModel,
    v_floor: f64,
    law: Arc<ResidualLaw>,
    pub n_train: usize,
}

impl ConditionalCdfModel {
    pub fn law(&self) -> &Arc<ResidualLaw> {
        &self.law
    }

    pub fn bandwidth(&self) -> Option<f64> {
        match self.law.as_ref() {
            ResidualLaw::Kernel(t) => Some(t.bandwidth),
            _ => None,
        }
    }

    /// Location and scale at a raw feature row.
    pub fn loc_scale(&self, raw: &[f64]) -> (f64, f64) {
        let m = self.mean.predict_row(raw);
        let v = self.var.predict_row(raw).max(self.v_floor);
        (m, v.sqrt())
    }

    pub fn cdf(&self, raw: &[f64], theta: f64) -> f64 {
        let (m, s) = self.loc_scale(raw);
        self.law.cdf((theta - m) / s)
    }

    pub fn density(&self, raw: &[f64], theta: f64) -> f64 {
        let (m, s) = self.loc_scale(raw);
        self.law.pdf((theta - m) / s) / s
    }
}

pub fn fit_additive_cdf(
    x: &FeatureMatrix,
    y: &[f64],
    spec: &LearnerSpec,
) -> Result<ConditionalCdfModel> {
    let n = y.len();
    if x.rows() != n {
        return Err(Error::Argument(
            "features and outcomes differ in length".into(),
        ));
    }
    if n < MIN_ROWS {
        return Err(Error::SampleSize {
            needed: MIN_ROWS,
            got: n,
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("non-finite outcome".into()));
    }
    let expander = Expander::fit(&spec.basis, x);
    let design = expander.design(x);
    let beta_m = least_squares(&design, y, spec.ridge)?;
    let fitted = &design * nalgebra::DVector::from_column_slice(&beta_m);
    let resid: Vec<f64> = y.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
    let sq: Vec<f64> = resid.iter().map(|r| r * r).collect();
    let beta_v = least_squares(&design, &sq, spec.ridge)?;
    let v_hat = &design * nalgebra::DVector::from_column_slice(&beta_v);
    if v_hat.iter().all(|&v| v <= 0.0) {
        return Err(Error::VarianceDegenerate);
    }
    // A variance fit that dips below zero would otherwise blow up the
    // standardized residuals and with them the kernel bandwidth.
    let mean_sq = sq.iter().sum::<f64>() / n as f64;
    let v_floor = (1e-6 * variance(y))
        .max(REL_VAR_FLOOR * mean_sq)
        .max(f64::MIN_POSITIVE);
    let mut std_resid: Vec<f64> = resid
        .iter()
        .zip(v_hat.iter())
        .map(|(r, &v)| r / v.max(v_floor).sqrt())
        .collect();
    let center = std_resid.iter().sum::<f64>() / n as f64;
    for e in &mut std_resid {
        *e -= center;
    }
    let h = match spec.bandwidth {
        Bandwidth::Silverman => 1.06 * variance(&std_resid).sqrt() * (n as f64).powf(-0.2),
        Bandwidth::Fixed(h) => h,
    };
    if !(h > 0.0) {
        return Err(Error::VarianceDegenerate);
    }
    let table = KernelTable::build(&std_resid, h);
    Ok(ConditionalCdfModel {
        mean: linear_from_parts(expander.clone(), beta_m, n),
        var: linear_from_parts(expander, beta_v, n),
        v_floor,
        law: Arc::new(ResidualLaw::Kernel(table)),
        n_train: n,
    })
}
