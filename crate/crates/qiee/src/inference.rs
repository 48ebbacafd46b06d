//! Standard errors, Wald intervals and quantile rearrangement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::engine::{MomentProblem, Observations, ScoreEvaluator};
use crate::error::{Error, Result};
use crate::estimands::{estimate, Method};
use crate::math::{norm_quantile, variance};
use crate::nuisance::{fit_in_sample, FittedNuisance, LearnerSpec};

pub const DEFAULT_BOOT: usize = 200;
pub const MIN_BOOT: usize = 50;
/// Largest tolerated share of failed bootstrap replicates.
pub const MAX_BOOT_FAILURES: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMethod {
    Eif,
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub se: f64,
    pub method: VarianceMethod,
    pub b_used: Option<f64>,
    pub replicates: usize,
}

/// sqrt(P_n[s^2]) / (B sqrt(n)) for per-unit scores s = g + phi.
pub fn eif_se(scores: &[f64], b: f64) -> Result<f64> {
    if !(b > 0.0) || !b.is_finite() {
        return Err(Error::Degeneracy(format!("normalizer B = {b}")));
    }
    let n = scores.len() as f64;
    let m2 = scores.iter().map(|s| s * s).sum::<f64>() / n;
    let se = m2.sqrt() / (b * n.sqrt());
    if !(se > 0.0) || !se.is_finite() {
        return Err(Error::Degeneracy(format!("EIF standard error is {se}")));
    }
    Ok(se)
}

pub fn eif_variance(
    problem: &MomentProblem,
    data: &Dataset,
    nuisance: &FittedNuisance,
    theta: f64,
    b: f64,
) -> Result<VarianceEstimate> {
    let obs = Observations::new(data, &problem.target)?;
    let (g, phi) = ScoreEvaluator::new(problem, &obs, nuisance)?.unit_scores(theta, problem.q);
    let scores: Vec<f64> = g.iter().zip(&phi).map(|(a, b)| a + b).collect();
    Ok(VarianceEstimate {
        se: eif_se(&scores, b)?,
        method: VarianceMethod::Eif,
        b_used: Some(b),
        replicates: 0,
    })
}

/// Seed of bootstrap replicate `r`, independent of scheduling order.
fn replicate_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (r as u64)
            .wrapping_add(1)
            .wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Nonparametric bootstrap of an arbitrary statistic: resample units with
/// replacement, recompute, and take the SD of the replicates.
pub fn bootstrap_statistic<F>(
    data: &Dataset,
    n_boot: usize,
    seed: u64,
    stat: F,
) -> Result<VarianceEstimate>
where
    F: Fn(&Dataset) -> Result<f64> + Sync,
{
    if n_boot < MIN_BOOT {
        return Err(Error::Argument(format!("n_boot must be >= {MIN_BOOT}")));
    }
    let n = data.n();
    let results: Vec<Result<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed(seed, r));
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            stat(&data.select_rows(&rows))
        })
        .collect();
    let mut ok = Vec::with_capacity(n_boot);
    let mut last = String::new();
    for r in results {
        match r {
            Ok(v) if v.is_finite() => ok.push(v),
            Ok(v) => last = format!("non-finite replicate {v}"),
            Err(e) => last = e.to_string(),
        }
    }
    let failed = n_boot - ok.len();
    if failed as f64 > MAX_BOOT_FAILURES * n_boot as f64 || ok.len() < 2 {
        return Err(Error::Instability {
            failed,
            total: n_boot,
            last,
        });
    }
    let se = variance(&ok).sqrt();
    if !(se > 0.0) {
        return Err(Error::Degeneracy(
            "bootstrap replicates are all equal".into(),
        ));
    }
    Ok(VarianceEstimate {
        se,
        method: VarianceMethod::Bootstrap,
        b_used: None,
        replicates: ok.len(),
    })
}

pub(crate) fn require_parametric(specs: &[LearnerSpec]) -> Result<()> {
    if let Some(s) = specs.iter().find(|s| !s.is_parametric()) {
        return Err(Error::BootstrapRejected(format!(
            "{} is a flexible learner; the bootstrap is only justified for parametric nuisance models, use the EIF variance",
            s.describe()
        )));
    }
    Ok(())
}

/// Bootstrap SE of the debiased estimator with nuisances refitted in-sample
/// on every resample using the same learner specs.
pub fn bootstrap_variance(
    problem: &MomentProblem,
    data: &Dataset,
    specs: &[LearnerSpec],
    n_boot: usize,
    seed: u64,
) -> Result<VarianceEstimate> {
    require_parametric(specs)?;
    bootstrap_statistic(data, n_boot, seed, |d| {
        let nuis = fit_in_sample(d, &problem.roles, specs)?;
        Ok(estimate(problem, d, &nuis, Method::Debiased)?.theta)
    })
}

/// Joint bootstrap SE of the difference of two debiased quantiles.
pub fn bootstrap_effect_variance(
    minuend: (&MomentProblem, &[LearnerSpec]),
    subtrahend: (&MomentProblem, &[LearnerSpec]),
    data: &Dataset,
    n_boot: usize,
    seed: u64,
) -> Result<VarianceEstimate> {
    require_parametric(minuend.1)?;
    require_parametric(subtrahend.1)?;
    bootstrap_statistic(data, n_boot, seed, |d| {
        let mut out = [0.0; 2];
        for (k, (p, specs)) in [minuend, subtrahend].into_iter().enumerate() {
            let nuis = fit_in_sample(d, &p.roles, specs)?;
            out[k] = estimate(p, d, &nuis, Method::Debiased)?.theta;
        }
        Ok(out[0] - out[1])
    })
}

/// theta +- z_{(1 + level)/2} se.
pub fn wald_ci(theta: f64, se: f64, level: f64) -> (f64, f64) {
    assert!(
        level > 0.0 && level < 1.0,
        "confidence level must lie in (0, 1)"
    );
    let z = norm_quantile(0.5 + 0.5 * level);
    (theta - z * se, theta + z * se)
}

/// Monotone rearrangement: Q(q_j) = inf{y : sum_l I(Q(q_l) <= y)(q_l - q_{l-1}) >= q_j}
/// with q_0 = 0.
pub fn rearrange(qs: &[f64], estimates: &[f64]) -> Result<Vec<f64>> {
    if qs.len() != estimates.len() {
        return Err(Error::Argument(format!(
            "{} levels but {} estimates",
            qs.len(),
            estimates.len()
        )));
    }
    if qs.windows(2).any(|w| !(w[0] < w[1])) || qs.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
        return Err(Error::Argument(
            "levels must be strictly increasing in (0, 1)".into(),
        ));
    }
    let mut order: Vec<usize> = (0..qs.len()).collect();
    order.sort_by(|&a, &b| estimates[a].total_cmp(&estimates[b]));
    let mut cum = Vec::with_capacity(order.len());
    let mut acc = 0.0;
    for &l in &order {
        acc += qs[l] - if l == 0 { 0.0 } else { qs[l - 1] };
        cum.push(acc);
    }
    // the weights telescope, so allow for rounding in the comparison
    let slack = 1e-12;
    Ok(qs
        .iter()
        .map(|&qj| {
            let k = cum
                .iter()
                .position(|&c| c >= qj - slack)
                .unwrap_or(cum.len() - 1);
            estimates[order[k]]
        })
        .collect())
}
