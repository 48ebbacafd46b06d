//! Simulation designs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Roles};
use crate::error::{Error, Result};
use crate::math::expit;

pub const MIN_N: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DgpFamily {
    /// Confounded binary treatment, heteroscedastic Gaussian outcome.
    Example1,
    /// Example 1 plus two correlated Gaussian mediators.
    Example2,
    /// Example 1 with a survival indicator; the outcome is undefined for non-survivors.
    Example3,
    /// Two periods with time-varying confounding.
    Longitudinal2,
    /// Two periods, both treatments fair coin flips.
    Longitudinal2Randomized,
    /// Fair-coin treatment, Y ~ U(0, 1) independent of everything.
    NullRandomized,
}

impl DgpFamily {
    pub fn label(self) -> &'static str {
        match self {
            DgpFamily::Example1 => "ex1",
            DgpFamily::Example2 => "ex2",
            DgpFamily::Example3 => "ex3",
            DgpFamily::Longitudinal2 => "long",
            DgpFamily::Longitudinal2Randomized => "long-randomized",
            DgpFamily::NullRandomized => "null",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        Ok(match s {
            "ex1" | "example1" => DgpFamily::Example1,
            "ex2" | "example2" => DgpFamily::Example2,
            "ex3" | "example3" => DgpFamily::Example3,
            "long" | "longitudinal2" => DgpFamily::Longitudinal2,
            "long-randomized" => DgpFamily::Longitudinal2Randomized,
            "null" => DgpFamily::NullRandomized,
            _ => return Err(Error::Argument(format!("unknown design `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub family: DgpFamily,
    pub n: usize,
    pub seed: u64,
}

pub fn generate(spec: &DgpSpec) -> Result<Dataset> {
    if spec.n < MIN_N {
        return Err(Error::Argument(format!("designs need n >= {MIN_N}")));
    }
    match spec.family {
        DgpFamily::Example1 => dgp_example1(spec.n, spec.seed),
        DgpFamily::Example2 => dgp_example2(spec.n, spec.seed),
        DgpFamily::Example3 => dgp_example3(spec.n, spec.seed),
        DgpFamily::Longitudinal2 => dgp_longitudinal2(spec.n, spec.seed, false),
        DgpFamily::Longitudinal2Randomized => dgp_longitudinal2(spec.n, spec.seed, true),
        DgpFamily::NullRandomized => dgp_null(spec.n, spec.seed),
    }
}

pub(crate) const COVARIATES: [&str; 4] = ["l1", "l2", "l3", "l4"];

/// Linear predictor of P(A = 1 | L) shared by Examples 1-3.
pub(crate) fn treatment_index(l: &[f64; 4]) -> f64 {
    -l[0] + 0.5 * l[1] - 0.25 * l[2] - 0.1 * l[3]
}

/// Covariate part of the outcome mean shared by Examples 1-3.
pub(crate) fn outcome_index(l: &[f64; 4]) -> f64 {
    10.0 * l[0] + 5.0 * l[1] + 5.0 * l[2] + 5.0 * l[3]
}

/// Linear predictor of P(M = 1 | A, L) in Example 3.
pub(crate) fn survival_index(a: f64, l: &[f64; 4]) -> f64 {
    -1.0 + 2.0 * a + l[0] - 0.8 * l[1] + 0.6 * l[2] - l[3]
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn bernoulli(rng: &mut ChaCha8Rng, p: f64) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

fn covariate_draw(rng: &mut ChaCha8Rng) -> [f64; 4] {
    [normal(rng), normal(rng), normal(rng), normal(rng)]
}

fn base_roles() -> Roles {
    Roles {
        outcome: Some("y".into()),
        treatment: Some("a".into()),
        covariates: COVARIATES.iter().map(|s| s.to_string()).collect(),
        ..Roles::default()
    }
}

fn assemble(cols: Vec<(&str, Vec<f64>)>, roles: Roles) -> Result<Dataset> {
    Dataset::new(
        cols.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        roles,
    )
}

fn split_covariates(ls: &[[f64; 4]]) -> Vec<(&'static str, Vec<f64>)> {
    (0..4)
        .map(|k| (COVARIATES[k], ls.iter().map(|l| l[k]).collect()))
        .collect()
}

pub fn dgp_example1(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ls, mut a, mut y) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for _ in 0..n {
        let l = covariate_draw(&mut rng);
        let ai = bernoulli(&mut rng, expit(treatment_index(&l)));
        let sd = ((2.0 + ai) / 2.0).exp();
        y.push(1.5 * ai + outcome_index(&l) + sd * normal(&mut rng));
        a.push(ai);
        ls.push(l);
    }
    let mut cols = split_covariates(&ls);
    cols.push(("a", a));
    cols.push(("y", y));
    assemble(cols, base_roles())
}

pub fn dgp_example2(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rho: f64 = 0.2;
    let tail = (1.0 - rho * rho).sqrt();
    let mut ls = Vec::with_capacity(n);
    let (mut a, mut m1, mut m2, mut y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let l = covariate_draw(&mut rng);
        let ai = bernoulli(&mut rng, expit(treatment_index(&l)));
        let (z1, z2) = (normal(&mut rng), normal(&mut rng));
        let mi1 = 0.5 * ai + 2.0 * l[0] + l[1] + l[2] + l[3] + z1;
        let mi2 = ai - l[0] - l[1] - l[2] - l[3] + rho * z1 + tail * z2;
        let sd = ((2.0 + ai) / 2.0).exp();
        y.push(2.0 + 1.5 * ai + mi1 + mi2 + outcome_index(&l) + sd * normal(&mut rng));
        a.push(ai);
        m1.push(mi1);
        m2.push(mi2);
        ls.push(l);
    }
    let mut cols = split_covariates(&ls);
    cols.extend([("a", a), ("m1", m1), ("m2", m2), ("y", y)]);
    let roles = Roles {
        mediators: vec!["m1".into(), "m2".into()],
        ..base_roles()
    };
    assemble(cols, roles)
}

pub fn dgp_example3(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ls = Vec::with_capacity(n);
    let (mut a, mut m, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let l = covariate_draw(&mut rng);
        let ai = bernoulli(&mut rng, expit(treatment_index(&l)));
        let mi = bernoulli(&mut rng, expit(survival_index(ai, &l)));
        let sd = ((2.0 + ai) / 2.0).exp();
        let yi = 1.0 + 1.5 * ai + outcome_index(&l) + sd * normal(&mut rng);
        y.push(if mi == 1.0 { yi } else { f64::NAN });
        a.push(ai);
        m.push(mi);
        ls.push(l);
    }
    let mut cols = split_covariates(&ls);
    cols.extend([("a", a), ("m", m), ("y", y)]);
    let roles = Roles {
        survival: Some("m".into()),
        ..base_roles()
    };
    assemble(cols, roles)
}

/// Second-period propensity P(A2 = 1 | A1, L1, L2).
pub(crate) fn second_period_index(a1: f64, l2: f64) -> f64 {
    -0.2 + 0.5 * a1 + 0.5 * l2
}

pub fn dgp_longitudinal2(n: usize, seed: u64, randomized: bool) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut l1, mut a1, mut l2, mut a2, mut y) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let x1 = normal(&mut rng);
        let p1 = if randomized { 0.5 } else { expit(0.4 * x1) };
        let t1 = bernoulli(&mut rng, p1);
        let x2 = 0.5 * x1 + 0.5 * t1 + normal(&mut rng);
        let p2 = if randomized {
            0.5
        } else {
            expit(second_period_index(t1, x2))
        };
        let t2 = bernoulli(&mut rng, p2);
        y.push(1.0 + t1 + t2 + x1 + x2 + normal(&mut rng));
        l1.push(x1);
        a1.push(t1);
        l2.push(x2);
        a2.push(t2);
    }
    let roles = Roles {
        outcome: Some("y".into()),
        time_treatments: vec!["a1".into(), "a2".into()],
        time_covariates: vec![vec!["l1".into()], vec!["l2".into()]],
        ..Roles::default()
    };
    assemble(
        vec![("l1", l1), ("a1", a1), ("l2", l2), ("a2", a2), ("y", y)],
        roles,
    )
}

pub fn dgp_null(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ls = Vec::with_capacity(n);
    let (mut a, mut y) = (Vec::new(), Vec::new());
    for _ in 0..n {
        ls.push(covariate_draw(&mut rng));
        a.push(bernoulli(&mut rng, 0.5));
        y.push(rng.random::<f64>());
    }
    let mut cols = split_covariates(&ls);
    cols.extend([("a", a), ("y", y)]);
    assemble(cols, base_roles())
}

/// The nonlinear covariate map used to emulate a wrong working model.
/// The second component's denominator 1 + L1 is kept at least 0.05 away from
/// zero, keeping its sign.
pub fn misspecify_row(l: [f64; 4]) -> [f64; 4] {
    let d = 1.0 + l[0];
    let d = if d.abs() < 0.05 {
        0.05f64.copysign(d)
    } else {
        d
    };
    [
        (0.5 * l[0]).exp(),
        l[1] / d,
        (l[1] * l[2] / 25.0 + 0.6).powi(3),
        (l[1] + l[3] + 20.0).powi(2),
    ]
}

pub fn misspecify_covariates(rows: &[[f64; 4]]) -> Vec<[f64; 4]> {
    rows.iter().map(|&r| misspecify_row(r)).collect()
}

/// Covariate rows of a dataset with the standard l1..l4 columns.
pub(crate) fn covariate_rows(data: &Dataset) -> Result<Vec<[f64; 4]>> {
    let cols: Vec<&[f64]> = COVARIATES
        .iter()
        .map(|c| data.column(c))
        .collect::<Result<_>>()?;
    Ok((0..data.n())
        .map(|i| [cols[0][i], cols[1][i], cols[2][i], cols[3][i]])
        .collect())
}
