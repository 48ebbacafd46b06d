//! True quantiles and true nuisance functions of the simulation designs.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::dgp::{
    covariate_rows, outcome_index, second_period_index, survival_index, treatment_index, DgpFamily,
};
use crate::dataset::Dataset;
use crate::engine::MomentProblem;
use crate::error::{Error, Result};
use crate::estimands::{EstimandSpec, Target};
use crate::math::{expit, norm_cdf, norm_quantile};
use crate::nuisance::{Curves, FittedNuisance, ResidualLaw, RoleValues};

/// Seed of the covariate draws behind Monte Carlo truths; changing it
/// changes cached truths.
pub const ORACLE_SEED: u64 = 0x51EE_0001;
pub const ORACLE_DRAWS: usize = 1_000_000;

fn gaussian_quantile(mean: f64, var: f64, q: f64) -> f64 {
    mean + var.sqrt() * norm_quantile(q)
}

type TruthKey = (DgpFamily, String, u64);

fn cache() -> &'static Mutex<HashMap<TruthKey, f64>> {
    static CACHE: OnceLock<Mutex<HashMap<TruthKey, f64>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// True q-quantile of the target's potential outcome under the design.
pub fn oracle_truth(family: DgpFamily, target: &Target, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Argument(format!(
            "quantile level {q} outside (0, 1)"
        )));
    }
    let key = (family, target.to_string(), q.to_bits());
    if let Some(&v) = cache().lock().expect("truth cache poisoned").get(&key) {
        return Ok(v);
    }
    let v = compute_truth(family, target, q)?;
    cache().lock().expect("truth cache poisoned").insert(key, v);
    Ok(v)
}

/// Whether a truth is already cached in this process.
pub fn truth_is_cached(family: DgpFamily, target: &Target, q: f64) -> bool {
    cache()
        .lock()
        .expect("truth cache poisoned")
        .contains_key(&(family, target.to_string(), q.to_bits()))
}

/// Truth of a quantile or of a quantile difference.
pub fn oracle_truth_spec(family: DgpFamily, spec: &EstimandSpec, q: f64) -> Result<f64> {
    match spec {
        EstimandSpec::Quantile(t) => oracle_truth(family, t, q),
        EstimandSpec::Effect {
            minuend,
            subtrahend,
            ..
        } => Ok(oracle_truth(family, minuend, q)? - oracle_truth(family, subtrahend, q)?),
    }
}

fn unsupported(family: DgpFamily, target: &Target) -> Error {
    Error::Estimability(format!(
        "target {target} is not defined under design {}",
        family.label()
    ))
}

fn compute_truth(family: DgpFamily, target: &Target, q: f64) -> Result<f64> {
    use DgpFamily::*;
    match (family, target) {
        (Example1, Target::Qte { arm }) => {
            let a = f64::from(*arm);
            Ok(gaussian_quantile(1.5 * a, 175.0 + (2.0 + a).exp(), q))
        }
        (Example1, Target::Longitudinal { regimen }) if regimen.len() == 1 => {
            compute_truth(family, &Target::Qte { arm: regimen[0] }, q)
        }
        (Example2, Target::Qte { arm }) => {
            let a = f64::from(*arm);
            Ok(gaussian_quantile(2.0 + 3.0 * a, 198.4 + (2.0 + a).exp(), q))
        }
        (Example2, Target::Mediation) => Ok(gaussian_quantile(3.5, 198.4 + 3f64.exp(), q)),
        (Example3, Target::Truncation { arm }) => Ok(truncation_truth(*arm, q)),
        (Longitudinal2 | Longitudinal2Randomized, Target::Longitudinal { regimen })
            if regimen.len() == 2 =>
        {
            let (a1, a2) = (f64::from(regimen[0]), f64::from(regimen[1]));
            Ok(gaussian_quantile(1.0 + 1.5 * a1 + a2, 4.25, q))
        }
        (NullRandomized, Target::Qte { .. }) => Ok(q),
        _ => Err(unsupported(family, target)),
    }
}

/// Root of sum_i w(L_i) F(theta | arm, 1, L_i) / sum_i w(L_i) = q over a fixed
/// covariate sample, w(L) = P(M = 1 | A = 0, L).
fn truncation_truth(arm: u8, q: f64) -> f64 {
    let a = f64::from(arm);
    let sd = ((2.0 + a) / 2.0).exp();
    let draws = oracle_covariates();
    let parts: Vec<(f64, f64)> = draws
        .iter()
        .map(|l| {
            (
                expit(survival_index(0.0, l)),
                1.0 + 1.5 * a + outcome_index(l),
            )
        })
        .collect();
    let total: f64 = parts.iter().map(|p| p.0).sum();
    let mix = |theta: f64| -> f64 {
        parts
            .par_iter()
            .map(|&(w, m)| w * norm_cdf((theta - m) / sd))
            .sum::<f64>()
            / total
    };
    let (mut lo, mut hi) = (-150.0, 150.0);
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if mix(mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn oracle_covariates() -> &'static Vec<[f64; 4]> {
    static DRAWS: OnceLock<Vec<[f64; 4]>> = OnceLock::new();
    DRAWS.get_or_init(|| {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = ChaCha8Rng::seed_from_u64(ORACLE_SEED);
        (0..ORACLE_DRAWS)
            .map(|_| {
                [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ]
            })
            .collect()
    })
}

fn fixed(v: Vec<f64>) -> RoleValues {
    RoleValues::Fixed(v)
}

fn curve(loc: Vec<f64>, scale: Vec<f64>, law: ResidualLaw) -> RoleValues {
    let n = loc.len();
    RoleValues::Curve(Curves::LocScale {
        loc,
        scale,
        law_of: vec![0; n],
        laws: vec![Arc::new(law)],
    })
}

fn gaussian(loc: Vec<f64>, scale: f64) -> RoleValues {
    let n = loc.len();
    curve(loc, vec![scale; n], ResidualLaw::Gaussian)
}

fn arm_prob(p1: f64, arm: u8) -> f64 {
    if arm == 1 {
        p1
    } else {
        1.0 - p1
    }
}

/// True nuisance functions for every role of `problem` under the design,
/// evaluated on the units of `data`.
pub fn oracle_nuisance(
    family: DgpFamily,
    problem: &MomentProblem,
    data: &Dataset,
) -> Result<FittedNuisance> {
    use DgpFamily::*;
    let target = &problem.target;
    let roles: Vec<RoleValues> = match (family, target) {
        (Example1 | Example2 | NullRandomized, Target::Qte { arm }) => {
            qte_oracle(family, *arm, data)?
        }
        (Example1, Target::Longitudinal { regimen }) if regimen.len() == 1 => {
            qte_oracle(family, regimen[0], data)?
        }
        (Example2, Target::Mediation) => mediation_oracle(data)?,
        (Example3, Target::Truncation { arm }) => truncation_oracle(*arm, data)?,
        (Longitudinal2 | Longitudinal2Randomized, Target::Longitudinal { regimen })
            if regimen.len() == 2 =>
        {
            longitudinal_oracle(family == Longitudinal2Randomized, regimen, data)?
        }
        _ => return Err(unsupported(family, target)),
    };
    if roles.len() != problem.roles.len() {
        return Err(Error::Argument("oracle role count mismatch".into()));
    }
    Ok(FittedNuisance {
        provenance: problem
            .roles
            .iter()
            .map(|r| format!("{}: true function of design {}", r.name, family.label()))
            .collect(),
        names: problem.roles.iter().map(|r| r.name.clone()).collect(),
        roles,
        folds: None,
        training_rows: Vec::new(),
    })
}

fn qte_oracle(family: DgpFamily, arm: u8, data: &Dataset) -> Result<Vec<RoleValues>> {
    let ls = covariate_rows(data)?;
    let a = f64::from(arm);
    if family == DgpFamily::NullRandomized {
        let n = ls.len();
        return Ok(vec![
            fixed(vec![0.5; n]),
            curve(vec![0.0; n], vec![1.0; n], ResidualLaw::Uniform01),
        ]);
    }
    let ps = ls
        .iter()
        .map(|l| arm_prob(expit(treatment_index(l)), arm))
        .collect();
    let (shift, var) = if family == DgpFamily::Example2 {
        // M1 + M2 | A = a, L ~ N(1.5 a + L1, 2.4)
        (2.0 + 3.0 * a, (2.0 + a).exp() + 2.4)
    } else {
        (1.5 * a, (2.0 + a).exp())
    };
    let loc = ls
        .iter()
        .map(|l| {
            let extra = if family == DgpFamily::Example2 {
                l[0]
            } else {
                0.0
            };
            shift + outcome_index(l) + extra
        })
        .collect();
    Ok(vec![fixed(ps), gaussian(loc, var.sqrt())])
}

fn mediation_oracle(data: &Dataset) -> Result<Vec<RoleValues>> {
    let ls = covariate_rows(data)?;
    let m1 = data.column("m1")?;
    let m2 = data.column("m2")?;
    let e3 = 3f64.exp();
    let mut mu_loc = Vec::with_capacity(ls.len());
    let mut ps = Vec::with_capacity(ls.len());
    let mut med_ps = Vec::with_capacity(ls.len());
    let mut cdf_loc = Vec::with_capacity(ls.len());
    // precision matrix of the mediator noise, covariance [[1, .2], [.2, 1]]
    let det = 1.0 - 0.04;
    let (p11, p12, p22) = (1.0 / det, -0.2 / det, 1.0 / det);
    for (i, l) in ls.iter().enumerate() {
        let s = l[1] + l[2] + l[3];
        mu_loc.push(3.5 + 11.0 * l[0] + 5.0 * (l[1] + l[2] + l[3]));
        let p1 = expit(treatment_index(l));
        ps.push(p1);
        let quad = |a: f64| {
            let d1 = m1[i] - (0.5 * a + 2.0 * l[0] + s);
            let d2 = m2[i] - (a - l[0] - s);
            d1 * d1 * p11 + 2.0 * d1 * d2 * p12 + d2 * d2 * p22
        };
        let log_ratio = (p1 / (1.0 - p1)).ln() - 0.5 * (quad(1.0) - quad(0.0));
        med_ps.push(expit(log_ratio));
        cdf_loc.push(3.5 + m1[i] + m2[i] + outcome_index(l));
    }
    Ok(vec![
        gaussian(mu_loc, (e3 + 2.4).sqrt()),
        fixed(ps),
        fixed(med_ps),
        gaussian(cdf_loc, e3.sqrt()),
    ])
}

fn truncation_oracle(arm: u8, data: &Dataset) -> Result<Vec<RoleValues>> {
    let ls = covariate_rows(data)?;
    let a = f64::from(arm);
    let s0 = ls.iter().map(|l| expit(survival_index(0.0, l))).collect();
    let loc = ls
        .iter()
        .map(|l| 1.0 + 1.5 * a + outcome_index(l))
        .collect();
    let cdf = gaussian(loc, ((2.0 + a) / 2.0).exp());
    let ps = ls.iter().map(|l| expit(treatment_index(l))).collect();
    if arm == 0 {
        Ok(vec![fixed(s0), cdf, fixed(ps)])
    } else {
        let s1 = ls.iter().map(|l| expit(survival_index(1.0, l))).collect();
        Ok(vec![fixed(s0), cdf, fixed(s1), fixed(ps)])
    }
}

fn longitudinal_oracle(
    randomized: bool,
    regimen: &[u8],
    data: &Dataset,
) -> Result<Vec<RoleValues>> {
    let l1 = data.column("l1")?;
    let l2 = data.column("l2")?;
    let a1 = data.time_treatment(0)?;
    let (r1, r2) = (f64::from(regimen[0]), f64::from(regimen[1]));
    let n = data.n();
    let (mut p1, mut p2, mut m1, mut m2) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for i in 0..n {
        let (q1, q2) = if randomized {
            (0.5, 0.5)
        } else {
            (expit(0.4 * l1[i]), expit(second_period_index(a1[i], l2[i])))
        };
        p1.push(arm_prob(q1, regimen[0]));
        p2.push(arm_prob(q2, regimen[1]));
        m1.push(1.0 + 1.5 * r1 + r2 + 1.5 * l1[i]);
        m2.push(1.0 + r1 + r2 + l1[i] + l2[i]);
    }
    Ok(vec![
        fixed(p1),
        fixed(p2),
        gaussian(m1, 2f64.sqrt()),
        gaussian(m2, 1.0),
    ])
}
