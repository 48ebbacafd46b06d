//! The four built-in quantile estimands, their estimators and effects.
//!
//! Every score here is affine in tau: g + phi = a(W, theta) - tau w(W, theta)
//! with w > 0, which the inverse-CDF comparator exploits.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::engine::{
    estimate_b, role_values_at, solve_problem, unit_scores_from, MomentProblem, Observations,
    ScoreEvaluator, ScoreTrace, Selection,
};
use crate::error::{Error, Result};
use crate::inference::{eif_se, wald_ci};
use crate::nuisance::{
    Column, Condition, FeatureSet, FittedNuisance, LearnerSpec, NuisanceRole, RoleTarget,
};

/// The potential-outcome quantile being targeted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Target {
    /// Q of Y under treatment `arm`.
    Qte { arm: u8 },
    /// Q of the cross-world outcome Y(1, M(0)).
    Mediation,
    /// Q of Y(arm) among always-survivors.
    Truncation { arm: u8 },
    /// Q of Y under a fixed treatment regimen over T periods.
    Longitudinal { regimen: Vec<u8> },
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Qte { arm } => write!(f, "qte:a={arm}"),
            Target::Mediation => write!(f, "mediation:1m0"),
            Target::Truncation { arm } => write!(f, "truncation:a={arm}"),
            Target::Longitudinal { regimen } => {
                let r: Vec<String> = regimen.iter().map(u8::to_string).collect();
                write!(f, "longitudinal:a={}", r.join(","))
            }
        }
    }
}

fn parse_arm(s: &str) -> Result<u8> {
    match s {
        "0" => Ok(0),
        "1" => Ok(1),
        _ => Err(Error::Argument(format!(
            "treatment level `{s}` must be 0 or 1"
        ))),
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, arg) = s.split_once(':').unwrap_or((s, ""));
        let level = |arg: &str| -> Result<String> {
            arg.strip_prefix("a=")
                .map(str::to_string)
                .ok_or_else(|| Error::Argument(format!("expected `a=...` in `{s}`")))
        };
        match head {
            "qte" => Ok(Target::Qte {
                arm: parse_arm(&level(arg)?)?,
            }),
            "mediation" if arg == "1m0" => Ok(Target::Mediation),
            "truncation" => Ok(Target::Truncation {
                arm: parse_arm(&level(arg)?)?,
            }),
            "longitudinal" => {
                let regimen = level(arg)?
                    .split(',')
                    .map(|p| parse_arm(p.trim()))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Target::Longitudinal { regimen })
            }
            _ => Err(Error::Argument(format!("unknown estimand `{s}`"))),
        }
    }
}

impl From<Target> for String {
    fn from(t: Target) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for Target {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// A single quantile or a difference of two quantiles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EstimandSpec {
    Quantile(Target),
    Effect {
        name: String,
        minuend: Target,
        subtrahend: Target,
    },
}

impl EstimandSpec {
    pub fn targets(&self) -> Vec<Target> {
        match self {
            EstimandSpec::Quantile(t) => vec![t.clone()],
            EstimandSpec::Effect {
                minuend,
                subtrahend,
                ..
            } => vec![minuend.clone(), subtrahend.clone()],
        }
    }
}

impl FromStr for EstimandSpec {
    type Err = Error;

    /// Accepts a target string or one of `qte`, `nqie`, `nqde`, `sqce`.
    fn from_str(s: &str) -> Result<Self> {
        let effect = |name: &str, a: Target, b: Target| EstimandSpec::Effect {
            name: name.to_string(),
            minuend: a,
            subtrahend: b,
        };
        match s.trim() {
            "qte" => Ok(effect(
                "qte",
                Target::Qte { arm: 1 },
                Target::Qte { arm: 0 },
            )),
            "nqie" => Ok(effect("nqie", Target::Qte { arm: 1 }, Target::Mediation)),
            "nqde" => Ok(effect("nqde", Target::Mediation, Target::Qte { arm: 0 })),
            "sqce" => Ok(effect(
                "sqce",
                Target::Truncation { arm: 1 },
                Target::Truncation { arm: 0 },
            )),
            other => Ok(EstimandSpec::Quantile(other.parse()?)),
        }
    }
}

impl fmt::Display for EstimandSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimandSpec::Quantile(t) => t.fmt(f),
            EstimandSpec::Effect { name, .. } => f.write_str(name),
        }
    }
}

fn ind(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

impl Target {
    /// Identifying moment g(W, tau, theta, h).
    pub(crate) fn g(&self, obs: &Observations, i: usize, h: &[f64], tau: f64, theta: f64) -> f64 {
        match self {
            Target::Qte { arm } => {
                let hit = ind(obs.a[i] == f64::from(*arm) && obs.y[i] <= theta);
                hit / h[0] - tau
            }
            Target::Mediation => h[0] - tau,
            Target::Truncation { .. } => h[0] * (h[1] - tau),
            Target::Longitudinal { regimen } => {
                let t = regimen.len();
                let weight: f64 = h[..t].iter().product();
                obs.follow[t - 1][i] * ind(obs.y[i] <= theta) / weight - tau
            }
        }
    }

    /// Adjustment term phi(W, tau, theta, h).
    pub(crate) fn phi(&self, obs: &Observations, i: usize, h: &[f64], tau: f64, theta: f64) -> f64 {
        let below = ind(obs.y[i] <= theta);
        match self {
            Target::Qte { arm } => {
                let treated = ind(obs.a[i] == f64::from(*arm));
                h[1] - treated * h[1] / h[0]
            }
            Target::Mediation => {
                let a = obs.a[i];
                a / (1.0 - h[1]) * (1.0 - h[2]) / h[2] * (below - h[3])
                    + (1.0 - a) / (1.0 - h[1]) * (h[3] - h[0])
            }
            Target::Truncation { arm: 0 } => {
                let (a, m) = (obs.a[i], obs.s[i]);
                let resid = if m == 1.0 { below - h[1] } else { 0.0 };
                (1.0 - a) * m / (1.0 - h[2]) * resid
                    + (1.0 - a) * (h[1] - tau) / (1.0 - h[2]) * (m - h[0])
            }
            Target::Truncation { .. } => {
                let (a, m) = (obs.a[i], obs.s[i]);
                let resid = if m == 1.0 { below - h[1] } else { 0.0 };
                h[0] * a * m / (h[2] * h[3]) * resid
                    + (1.0 - a) * (h[1] - tau) / (1.0 - h[3]) * (m - h[0])
            }
            Target::Longitudinal { regimen } => {
                let t = regimen.len();
                let mut weight = 1.0;
                let mut out = h[t];
                for s in 0..t {
                    weight *= h[s];
                    let w = obs.follow[s][i] / weight;
                    if s + 1 < t {
                        out += w * (h[t + s + 1] - h[t + s]);
                    } else {
                        out -= w * h[t + s];
                    }
                }
                out
            }
        }
    }

    /// Roles read by g.
    pub(crate) fn g_roles(&self) -> Vec<usize> {
        match self {
            Target::Qte { .. } | Target::Mediation => vec![0],
            Target::Truncation { .. } => vec![0, 1],
            Target::Longitudinal { regimen } => (0..regimen.len()).collect(),
        }
    }

    /// Per-unit contribution to B given role values h and theta-derivatives dh.
    pub(crate) fn b_unit(&self, h: &[f64], dh: &[f64]) -> f64 {
        match self {
            Target::Qte { .. } => dh[1],
            Target::Mediation => dh[0],
            Target::Truncation { .. } => h[0] * dh[1],
            Target::Longitudinal { regimen } => dh[regimen.len()],
        }
    }

    /// Number of periods for longitudinal targets, else 1.
    pub fn periods(&self) -> usize {
        match self {
            Target::Longitudinal { regimen } => regimen.len(),
            _ => 1,
        }
    }
}

fn covariates() -> FeatureSet {
    FeatureSet {
        covariates: true,
        ..FeatureSet::default()
    }
}

fn on(column: Column, value: u8) -> Condition {
    Condition {
        column,
        value: f64::from(value),
    }
}

fn probability(
    name: &str,
    response: Column,
    level: u8,
    filter: Vec<Condition>,
    features: FeatureSet,
) -> NuisanceRole {
    NuisanceRole {
        name: name.into(),
        target: RoleTarget::Probability {
            response,
            level: f64::from(level),
        },
        filter,
        features,
        spec: LearnerSpec::logistic(),
    }
}

fn outcome_cdf(name: &str, filter: Vec<Condition>, features: FeatureSet) -> NuisanceRole {
    NuisanceRole {
        name: name.into(),
        target: RoleTarget::OutcomeCdf,
        filter,
        features,
        spec: LearnerSpec::additive_cdf(),
    }
}

fn nested_mean(
    name: &str,
    inner: usize,
    filter: Vec<Condition>,
    features: FeatureSet,
) -> NuisanceRole {
    NuisanceRole {
        name: name.into(),
        target: RoleTarget::NestedMean { inner },
        filter,
        features,
        spec: LearnerSpec::grid_family(100),
    }
}

/// Roles: propensity P(A = a | L), outcome CDF F(theta | a, L).
pub fn build_qte_problem(arm: u8, q: f64) -> Result<MomentProblem> {
    parse_arm(&arm.to_string())?;
    let roles = vec![
        probability("propensity", Column::Treatment, arm, vec![], covariates()),
        outcome_cdf(
            "outcome_cdf",
            vec![on(Column::Treatment, arm)],
            covariates(),
        ),
    ];
    MomentProblem::new(Target::Qte { arm }, q, roles, vec![(0, 1)])
}

/// Roles: nested mean E[F(theta | 1, M, L) | A = 0, L], P(A = 1 | L),
/// P(A = 1 | M, L), F(theta | 1, M, L).
pub fn build_mediation_problem(q: f64) -> Result<MomentProblem> {
    let with_mediators = FeatureSet {
        mediators: true,
        covariates: true,
        time_covariates: 0,
    };
    let roles = vec![
        nested_mean(
            "nested_mean",
            3,
            vec![on(Column::Treatment, 0)],
            covariates(),
        ),
        probability("propensity", Column::Treatment, 1, vec![], covariates()),
        probability(
            "mediator_propensity",
            Column::Treatment,
            1,
            vec![],
            with_mediators,
        ),
        outcome_cdf(
            "outcome_cdf",
            vec![on(Column::Treatment, 1)],
            with_mediators,
        ),
    ];
    MomentProblem::new(Target::Mediation, q, roles, vec![(0, 1), (2, 3)])
}

/// Arm 0 roles: P(M = 1 | A = 0, L), F(theta | 0, 1, L), P(A = 1 | L).
/// Arm 1 roles: P(M = 1 | A = 0, L), F(theta | 1, 1, L), P(M = 1 | A = 1, L),
/// P(A = 1 | L).
pub fn build_truncation_problem(arm: u8, q: f64) -> Result<MomentProblem> {
    parse_arm(&arm.to_string())?;
    let survival_control = probability(
        "survival_control",
        Column::Survival,
        1,
        vec![on(Column::Treatment, 0)],
        covariates(),
    );
    let cdf = outcome_cdf(
        "outcome_cdf",
        vec![on(Column::Treatment, arm), on(Column::Survival, 1)],
        covariates(),
    );
    let propensity = probability("propensity", Column::Treatment, 1, vec![], covariates());
    if arm == 0 {
        MomentProblem::new(
            Target::Truncation { arm },
            q,
            vec![survival_control, cdf, propensity],
            vec![(0, 1), (0, 2)],
        )
    } else {
        let survival_treated = probability(
            "survival_treated",
            Column::Survival,
            1,
            vec![on(Column::Treatment, 1)],
            covariates(),
        );
        MomentProblem::new(
            Target::Truncation { arm },
            q,
            vec![survival_control, cdf, survival_treated, propensity],
            vec![(0, 1), (0, 3), (1, 2), (1, 3)],
        )
    }
}

/// Roles 0..T: P(A_t = a_t | history) among regimen followers up to t-1.
/// Roles T..2T: nested outcome means, the last one the outcome CDF given the
/// full history, earlier ones fitted by regression imputation.
pub fn build_longitudinal_problem(regimen: &[u8], q: f64) -> Result<MomentProblem> {
    let t_max = regimen.len();
    if t_max == 0 {
        return Err(Error::Argument(
            "regimen must cover at least one period".into(),
        ));
    }
    for &a in regimen {
        parse_arm(&a.to_string())?;
    }
    let history = |t: usize| -> Vec<Condition> {
        (0..t)
            .map(|s| on(Column::TimeTreatment(s), regimen[s]))
            .collect()
    };
    let through = |t: usize| FeatureSet {
        time_covariates: t,
        ..FeatureSet::default()
    };
    let mut roles = Vec::with_capacity(2 * t_max);
    for t in 0..t_max {
        roles.push(probability(
            &format!("propensity_{}", t + 1),
            Column::TimeTreatment(t),
            regimen[t],
            history(t),
            through(t + 1),
        ));
    }
    for t in 0..t_max {
        let name = format!("outcome_mean_{}", t + 1);
        if t + 1 == t_max {
            roles.push(outcome_cdf(&name, history(t_max), through(t_max)));
        } else {
            roles.push(nested_mean(
                &name,
                t_max + t + 1,
                history(t + 1),
                through(t + 1),
            ));
        }
    }
    let pairs = (0..t_max).map(|t| (t, t_max + t)).collect();
    MomentProblem::new(
        Target::Longitudinal {
            regimen: regimen.to_vec(),
        },
        q,
        roles,
        pairs,
    )
}

pub fn build_problem(target: &Target, q: f64) -> Result<MomentProblem> {
    match target {
        Target::Qte { arm } => build_qte_problem(*arm, q),
        Target::Mediation => build_mediation_problem(q),
        Target::Truncation { arm } => build_truncation_problem(*arm, q),
        Target::Longitudinal { regimen } => build_longitudinal_problem(regimen, q),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Plugin,
    Debiased,
    /// Plug-in equation with the true nuisances of a simulation design.
    Oracle,
    InverseCdf,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Plugin => "plugin",
            Method::Debiased => "debiased",
            Method::Oracle => "oracle",
            Method::InverseCdf => "inverse-cdf",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plugin" | "plug-in" => Ok(Method::Plugin),
            "debiased" => Ok(Method::Debiased),
            "oracle" => Ok(Method::Oracle),
            "inverse-cdf" => Ok(Method::InverseCdf),
            _ => Err(Error::Argument(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimand: String,
    pub q: f64,
    pub method: Method,
    pub theta: f64,
    pub b: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub level: f64,
    /// Plug-in root used to anchor the debiased crossing.
    pub anchor: Option<f64>,
    pub provenance: Vec<String>,
    pub trace: ScoreTrace,
    /// Per-unit influence values psi at theta.
    #[serde(skip)]
    pub influence: Vec<f64>,
}

pub const DEFAULT_LEVEL: f64 = 0.95;

/// Solves the requested equation and attaches B, the EIF standard error and
/// a Wald interval. Plug-in and debiased reports use psi = -(g + phi) / B;
/// oracle reports use psi = -g / B, the known-nuisance influence function.
pub fn estimate(
    problem: &MomentProblem,
    data: &Dataset,
    nuisance: &FittedNuisance,
    method: Method,
) -> Result<EstimateReport> {
    let obs = Observations::new(data, &problem.target)?;
    estimate_obs(problem, &obs, nuisance, method, DEFAULT_LEVEL)
}

pub fn estimate_obs(
    problem: &MomentProblem,
    obs: &Observations,
    nuisance: &FittedNuisance,
    method: Method,
    level: f64,
) -> Result<EstimateReport> {
    let (theta, anchor, trace) = match method {
        Method::Plugin | Method::Oracle => {
            let (t, tr) = solve_problem(problem, obs, nuisance, false, Selection::Smallest)?;
            (t, None, tr)
        }
        Method::Debiased => {
            let anchor = solve_problem(problem, obs, nuisance, false, Selection::Smallest)
                .ok()
                .map(|r| r.0);
            let sel = anchor.map_or(Selection::Smallest, Selection::ClosestTo);
            let (t, tr) = solve_problem(problem, obs, nuisance, true, sel)?;
            (t, anchor, tr)
        }
        Method::InverseCdf => {
            return Err(Error::Argument(
                "the inverse-CDF comparator needs a grid; use inverse_cdf_estimate".into(),
            ))
        }
    };
    finish_report(problem, obs, nuisance, method, theta, anchor, trace, level)
}

#[allow(clippy::too_many_arguments)]
fn finish_report(
    problem: &MomentProblem,
    obs: &Observations,
    nuisance: &FittedNuisance,
    method: Method,
    theta: f64,
    anchor: Option<f64>,
    trace: ScoreTrace,
    level: f64,
) -> Result<EstimateReport> {
    let b = estimate_b(problem, obs, nuisance, theta)?;
    let (g, phi) = ScoreEvaluator::new(problem, obs, nuisance)?.unit_scores(theta, problem.q);
    let scores: Vec<f64> = if method == Method::Oracle {
        g
    } else {
        g.iter().zip(&phi).map(|(a, b)| a + b).collect()
    };
    let se = eif_se(&scores, b)?;
    let influence = scores.iter().map(|s| -s / b).collect();
    Ok(EstimateReport {
        estimand: problem.target.to_string(),
        q: problem.q,
        method,
        theta,
        b,
        se,
        ci: wald_ci(theta, se, level),
        level,
        anchor,
        provenance: nuisance.provenance.clone(),
        trace,
        influence,
    })
}

/// tau-hat at each node: the closed-form root of the debiased equation in
/// tau, P_n[a] / P_n[w] where g + phi = a - tau w.
pub fn tau_path(
    problem: &MomentProblem,
    obs: &Observations,
    nuisance: &FittedNuisance,
    grid: &[f64],
) -> Result<Vec<f64>> {
    grid.iter()
        .map(|&theta| {
            let vals = role_values_at(nuisance, theta);
            let (g0, p0) = unit_scores_from(problem, obs, &vals, 0.0, theta);
            let (g1, p1) = unit_scores_from(problem, obs, &vals, 1.0, theta);
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..obs.n() {
                let s0 = g0[i] + p0[i];
                num += s0;
                den += s0 - (g1[i] + p1[i]);
            }
            if !(den > 0.0) || !num.is_finite() {
                return Err(Error::Degeneracy(format!(
                    "tau weight {den} at theta = {theta}"
                )));
            }
            Ok(num / den)
        })
        .collect()
}

/// First crossing of level q by the linear interpolant of (grid, taus).
pub fn invert_path(grid: &[f64], taus: &[f64], q: f64) -> Result<f64> {
    let (min, max) = taus
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| {
            (a.min(t), b.max(t))
        });
    if q < min || q > max || grid.len() != taus.len() || grid.is_empty() {
        return Err(Error::Inversion { q, min, max });
    }
    if taus[0] >= q {
        return Ok(grid[0]);
    }
    for k in 0..grid.len() - 1 {
        if taus[k] < q && taus[k + 1] >= q {
            let w = (q - taus[k]) / (taus[k + 1] - taus[k]);
            return Ok(grid[k] + w * (grid[k + 1] - grid[k]));
        }
    }
    Err(Error::Inversion { q, min, max })
}

/// Inverse-CDF comparator: solve for tau at each grid node, interpolate, and
/// invert at q. The SE is the EIF SE at the inverted value.
pub fn inverse_cdf_estimate(
    problem: &MomentProblem,
    data: &Dataset,
    nuisance: &FittedNuisance,
    grid: &[f64],
) -> Result<EstimateReport> {
    let obs = Observations::new(data, &problem.target)?;
    inverse_cdf_obs(problem, &obs, nuisance, grid, DEFAULT_LEVEL)
}

pub fn inverse_cdf_obs(
    problem: &MomentProblem,
    obs: &Observations,
    nuisance: &FittedNuisance,
    grid: &[f64],
    level: f64,
) -> Result<EstimateReport> {
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Argument(
            "grid must be strictly increasing with >= 2 nodes".into(),
        ));
    }
    let taus = tau_path(problem, obs, nuisance, grid)?;
    let theta = invert_path(grid, &taus, problem.q)?;
    let trace = ScoreTrace {
        bracket: (grid[0], grid[grid.len() - 1]),
        grid: grid.to_vec(),
        values: taus.iter().map(|t| t - problem.q).collect(),
        crossings: Vec::new(),
        selected: (theta, theta),
        root: theta,
        iterations: 0,
        width: 0.0,
    };
    finish_report(
        problem,
        obs,
        nuisance,
        Method::InverseCdf,
        theta,
        None,
        trace,
        level,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub name: String,
    pub q: f64,
    pub method: Method,
    pub estimate: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub level: f64,
}

/// Difference of two quantiles estimated on the same units; the SE is the
/// delta-method SE from the difference of the per-unit influence values.
pub fn effect(
    name: &str,
    minuend: &EstimateReport,
    subtrahend: &EstimateReport,
) -> Result<EffectReport> {
    if (minuend.q - subtrahend.q).abs() > 1e-12 {
        return Err(Error::Argument(format!(
            "effect needs a common q, got {} and {}",
            minuend.q, subtrahend.q
        )));
    }
    let n = minuend.influence.len();
    if n == 0 || n != subtrahend.influence.len() {
        return Err(Error::Argument(
            "effect needs influence values on the same units".into(),
        ));
    }
    let ss: f64 = minuend
        .influence
        .iter()
        .zip(&subtrahend.influence)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let se = (ss / n as f64).sqrt() / (n as f64).sqrt();
    if !(se > 0.0) {
        return Err(Error::Degeneracy("effect standard error is zero".into()));
    }
    let estimate = minuend.theta - subtrahend.theta;
    Ok(EffectReport {
        name: name.to_string(),
        q: minuend.q,
        method: minuend.method,
        estimate,
        se,
        ci: wald_ci(estimate, se, minuend.level),
        level: minuend.level,
    })
}
