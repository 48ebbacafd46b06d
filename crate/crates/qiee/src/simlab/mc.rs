//! Scenario catalog and the replicated-estimation runner.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{generate, DgpFamily, DgpSpec};
use super::oracle::{oracle_nuisance, oracle_truth_spec};
use crate::dataset::{make_folds, Dataset};
use crate::engine::{MomentProblem, Observations};
use crate::error::{Error, Result};
use crate::estimands::{
    build_problem, effect, estimate_obs, inverse_cdf_obs, EstimandSpec, Method, Target,
    DEFAULT_LEVEL,
};
use crate::math::{mean, variance};
use crate::nuisance::{
    crossfit, fit_in_sample, outcome_grid, FittedNuisance, LearnerKind, LearnerSpec,
};

pub const DEFAULT_N: usize = 1000;
pub const DEFAULT_REPS: usize = 200;
pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_SEED: u64 = 20_240_601;
/// Largest tolerated share of failed replications.
pub const MAX_REP_FAILURES: f64 = 0.1;
/// Ridge penalty of the per-node probit fits of grid outcome families.
pub const GRID_NODE_RIDGE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub id: String,
    pub family: DgpFamily,
    pub n: usize,
    /// Target string or effect name (`qte`, `nqie`, `nqde`, `sqce`).
    pub estimand: String,
    pub q: f64,
    pub method: Method,
    /// Grid size R: switches the outcome CDF and nested means to R-node
    /// grid families and sets the inverse-CDF nodes.
    pub grid: Option<usize>,
    /// Roles fed the transformed covariates.
    pub misspecified_roles: Vec<String>,
    /// 0 fits nuisances in-sample.
    pub k_folds: usize,
    pub n_reps: usize,
    pub base_seed: u64,
}

impl ScenarioSpec {
    pub fn estimand_spec(&self) -> Result<EstimandSpec> {
        self.estimand.parse()
    }

    pub fn truth(&self) -> Result<f64> {
        oracle_truth_spec(self.family, &self.estimand_spec()?, self.q)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::Argument(format!("q = {} outside (0, 1)", self.q)));
        }
        if self.n_reps == 0 {
            return Err(Error::Argument("n_reps must be positive".into()));
        }
        if self.k_folds == 1 {
            return Err(Error::Argument(
                "k_folds must be 0 (in-sample) or >= 2".into(),
            ));
        }
        if self.method == Method::InverseCdf && self.grid.is_none() {
            return Err(Error::Argument(
                "the inverse-CDF method needs a grid size".into(),
            ));
        }
        let problems: Vec<MomentProblem> = self
            .estimand_spec()?
            .targets()
            .iter()
            .map(|t| build_problem(t, self.q))
            .collect::<Result<_>>()?;
        for r in &self.misspecified_roles {
            if !problems.iter().any(|p| p.role_index(r).is_ok()) {
                return Err(Error::Argument(format!(
                    "no role named `{r}` in {}",
                    self.estimand
                )));
            }
        }
        self.truth()?;
        Ok(())
    }

    /// Learner specs for a problem under this scenario.
    pub fn specs_for(&self, problem: &MomentProblem) -> Vec<LearnerSpec> {
        problem
            .roles
            .iter()
            .map(|role| {
                let mut spec = role.spec.clone();
                if let Some(r) = self.grid {
                    spec = with_grid(spec, r);
                }
                if self.misspecified_roles.contains(&role.name) {
                    spec = spec.misspecified();
                }
                spec
            })
            .collect()
    }
}

/// Moves a curve learner onto an R-node grid: grid families get R nodes and
/// the additive CDF model is replaced by R per-node probit fits.
pub fn with_grid(spec: LearnerSpec, r: usize) -> LearnerSpec {
    match spec.kind {
        LearnerKind::GridCdfFamily => LearnerSpec { n_grid: r, ..spec },
        LearnerKind::AdditiveCdf => LearnerSpec {
            kind: LearnerKind::GridCdfFamily,
            n_grid: r,
            node_kind: LearnerKind::ProbitGlm,
            ridge: GRID_NODE_RIDGE,
            covariates: spec.covariates,
            ..LearnerSpec::default()
        },
        _ => spec,
    }
}

fn parse_q(s: &str) -> Result<f64> {
    let digits = s
        .strip_prefix('q')
        .ok_or_else(|| Error::Argument(format!("expected q<NN>, got `{s}`")))?;
    let v: u32 = digits
        .parse()
        .map_err(|_| Error::Argument(format!("bad quantile label `{s}`")))?;
    if !(1..=99).contains(&v) || digits.len() != 2 {
        return Err(Error::Argument(format!("bad quantile label `{s}`")));
    }
    Ok(f64::from(v) / 100.0)
}

fn parse_grid(s: &str) -> Result<usize> {
    let r = s
        .strip_prefix("R=")
        .and_then(|v| v.parse::<usize>().ok())
        .ok_or_else(|| Error::Argument(format!("expected R=<n>, got `{s}`")))?;
    if r < 2 {
        return Err(Error::Argument("grid size must be >= 2".into()));
    }
    Ok(r)
}

fn simple_method(s: &str) -> Result<Method> {
    match s {
        "plugin" => Ok(Method::Plugin),
        "debiased" => Ok(Method::Debiased),
        "oracle" => Ok(Method::Oracle),
        _ => Err(Error::Argument(format!("unknown method `{s}`"))),
    }
}

fn scenario_letter(s: &str, allowed: &str) -> Result<char> {
    let c = s
        .strip_prefix("scenario-")
        .filter(|r| r.len() == 1)
        .and_then(|r| r.chars().next())
        .filter(|c| allowed.contains(*c))
        .ok_or_else(|| Error::Argument(format!("unknown scenario `{s}`")))?;
    Ok(c)
}

fn roles(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Parses a catalog id such as `ex1/FT/q50/debiased`,
/// `ex2/scenario-c/q90/de-pl/R=10`, `ex3/scenario-d/q25/sqce/plugin` or
/// `long/q50/debiased/regimen=1,1`.
pub fn parse_scenario(id: &str) -> Result<ScenarioSpec> {
    let parts: Vec<&str> = id.split('/').collect();
    let bad = || Error::Argument(format!("unknown scenario `{id}`"));
    let mut spec = ScenarioSpec {
        id: id.to_string(),
        family: DgpFamily::Example1,
        n: DEFAULT_N,
        estimand: String::new(),
        q: 0.5,
        method: Method::Debiased,
        grid: None,
        misspecified_roles: Vec::new(),
        k_folds: DEFAULT_FOLDS,
        n_reps: DEFAULT_REPS,
        base_seed: DEFAULT_SEED,
    };
    match parts.first().copied() {
        Some("ex1") => {
            if !(4..=5).contains(&parts.len()) {
                return Err(bad());
            }
            spec.misspecified_roles = match parts[1] {
                "TT" => vec![],
                "FT" => roles(&["propensity"]),
                "TF" => roles(&["outcome_cdf"]),
                "FF" => roles(&["propensity", "outcome_cdf"]),
                _ => return Err(bad()),
            };
            spec.q = parse_q(parts[2])?;
            spec.method = simple_method(parts[3])?;
            let arm = match parts.get(4).copied() {
                None | Some("arm=0") => 0,
                Some("arm=1") => 1,
                _ => return Err(bad()),
            };
            spec.estimand = Target::Qte { arm }.to_string();
        }
        Some("ex2") => {
            if !(4..=5).contains(&parts.len()) {
                return Err(bad());
            }
            spec.family = DgpFamily::Example2;
            spec.misspecified_roles = match scenario_letter(parts[1], "abcdef")? {
                'a' => vec![],
                'b' => roles(&["propensity"]),
                'c' => roles(&["mediator_propensity"]),
                'd' => roles(&["outcome_cdf"]),
                'e' => roles(&["nested_mean"]),
                _ => roles(&[
                    "nested_mean",
                    "propensity",
                    "mediator_propensity",
                    "outcome_cdf",
                ]),
            };
            spec.q = parse_q(parts[2])?;
            spec.estimand = Target::Mediation.to_string();
            match (parts[3], parts.get(4)) {
                ("de-ml", None) => spec.method = Method::Debiased,
                ("plugin", None) => spec.method = Method::Plugin,
                ("oracle", None) => spec.method = Method::Oracle,
                ("de-pl", Some(r)) => {
                    spec.method = Method::Debiased;
                    spec.grid = Some(parse_grid(r)?);
                }
                ("hsu-pl", Some(r)) => {
                    spec.method = Method::InverseCdf;
                    spec.grid = Some(parse_grid(r)?);
                }
                _ => return Err(bad()),
            }
        }
        Some("ex3") => {
            if parts.len() != 5 {
                return Err(bad());
            }
            spec.family = DgpFamily::Example3;
            spec.misspecified_roles = match scenario_letter(parts[1], "abcde")? {
                'a' => vec![],
                'b' => roles(&["propensity"]),
                'c' => roles(&["survival_control", "survival_treated"]),
                'd' => roles(&["outcome_cdf"]),
                _ => roles(&[
                    "survival_control",
                    "survival_treated",
                    "outcome_cdf",
                    "propensity",
                ]),
            };
            spec.q = parse_q(parts[2])?;
            let (estimand, arm1) = match parts[3] {
                "arm0" => ("truncation:a=0", false),
                "arm1" => ("truncation:a=1", true),
                "sqce" => ("sqce", true),
                _ => return Err(bad()),
            };
            if !arm1 {
                spec.misspecified_roles.retain(|r| r != "survival_treated");
            }
            spec.estimand = estimand.to_string();
            spec.method = simple_method(parts[4])?;
        }
        Some("long") => {
            if !(3..=4).contains(&parts.len()) {
                return Err(bad());
            }
            spec.family = DgpFamily::Longitudinal2;
            spec.q = parse_q(parts[1])?;
            spec.method = simple_method(parts[2])?;
            let regimen = match parts.get(3) {
                None => "1,1".to_string(),
                Some(p) => p.strip_prefix("regimen=").ok_or_else(bad)?.to_string(),
            };
            spec.estimand = format!("longitudinal:a={regimen}");
        }
        _ => return Err(bad()),
    }
    spec.validate()?;
    Ok(spec)
}

/// Every catalog id.
pub fn catalog() -> Vec<String> {
    let mut out = Vec::new();
    for label in ["TT", "FT", "TF", "FF"] {
        for q in [25, 50, 75] {
            for m in ["plugin", "debiased", "oracle"] {
                out.push(format!("ex1/{label}/q{q}/{m}"));
            }
        }
    }
    for s in ['a', 'b', 'c', 'd', 'e', 'f'] {
        for q in [10, 25, 50, 75, 90] {
            for m in ["de-ml", "plugin", "oracle"] {
                out.push(format!("ex2/scenario-{s}/q{q}/{m}"));
            }
            for r in [4, 10, 40, 100] {
                out.push(format!("ex2/scenario-{s}/q{q}/de-pl/R={r}"));
                out.push(format!("ex2/scenario-{s}/q{q}/hsu-pl/R={r}"));
            }
        }
    }
    for s in ['a', 'b', 'c', 'd', 'e'] {
        for q in [25, 50, 75] {
            for e in ["arm0", "arm1", "sqce"] {
                for m in ["plugin", "debiased", "oracle"] {
                    out.push(format!("ex3/scenario-{s}/q{q}/{e}/{m}"));
                }
            }
        }
    }
    for q in [25, 50, 75] {
        for m in ["plugin", "debiased", "oracle"] {
            out.push(format!("long/q{q}/{m}"));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub covered: Option<bool>,
    /// Width of the grid cell containing the estimate, for grid scenarios.
    pub grid_spacing: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub truth: f64,
    pub n_reps: usize,
    pub n_success: usize,
    pub n_failed: usize,
    pub bias: f64,
    pub sd: f64,
    /// Monte Carlo SE of the bias, sd / sqrt(n_success).
    pub mc_se: f64,
    pub rmse: f64,
    pub mae: f64,
    pub coverage: f64,
    pub mean_se: f64,
}

impl McSummary {
    pub fn from_records(truth: f64, records: &[RepRecord]) -> Self {
        let ok: Vec<&RepRecord> = records.iter().filter(|r| r.estimate.is_some()).collect();
        let est: Vec<f64> = ok.iter().filter_map(|r| r.estimate).collect();
        let k = est.len() as f64;
        let err: Vec<f64> = est.iter().map(|e| e - truth).collect();
        let sd = variance(&est).sqrt();
        let ses: Vec<f64> = ok.iter().filter_map(|r| r.se).collect();
        let hits = ok.iter().filter(|r| r.covered == Some(true)).count() as f64;
        McSummary {
            truth,
            n_reps: records.len(),
            n_success: est.len(),
            n_failed: records.len() - est.len(),
            bias: mean(&err),
            sd,
            mc_se: sd / k.sqrt(),
            rmse: (err.iter().map(|e| e * e).sum::<f64>() / k).sqrt(),
            mae: err.iter().map(|e| e.abs()).sum::<f64>() / k,
            coverage: hits / k,
            mean_se: mean(&ses),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCResult {
    pub scenario: ScenarioSpec,
    pub truth: f64,
    pub records: Vec<RepRecord>,
    pub summary: McSummary,
    /// Learners actually used, since the catalog runs the built-in registry.
    pub learners: Vec<String>,
}

impl MCResult {
    /// Instability error when more than 10% of replications failed.
    pub fn check_stability(&self) -> Result<()> {
        let s = &self.summary;
        if s.n_failed as f64 > MAX_REP_FAILURES * s.n_reps as f64 {
            let last = self
                .records
                .iter()
                .rev()
                .find_map(|r| r.error.clone())
                .unwrap_or_default();
            return Err(Error::Instability {
                failed: s.n_failed,
                total: s.n_reps,
                last,
            });
        }
        Ok(())
    }
}

pub fn run_monte_carlo(scenario: &ScenarioSpec) -> Result<MCResult> {
    let out = run_monte_carlo_multi(std::slice::from_ref(scenario))?
        .pop()
        .expect("one result per scenario");
    out.check_stability()?;
    Ok(out)
}

/// Runs several scenarios on shared replications. Scenarios must agree on
/// design, n, n_reps and base_seed; within a replication the data are drawn
/// once and nuisance fits are shared between scenarios that need the same
/// fit. Stability is not checked here.
pub fn run_monte_carlo_multi(scenarios: &[ScenarioSpec]) -> Result<Vec<MCResult>> {
    let first = scenarios
        .first()
        .ok_or_else(|| Error::Argument("no scenarios".into()))?;
    for s in scenarios {
        s.validate()?;
        if s.family != first.family
            || s.n != first.n
            || s.n_reps != first.n_reps
            || s.base_seed != first.base_seed
        {
            return Err(Error::Argument(
                "scenarios in one campaign must share design, n, n_reps and base_seed".into(),
            ));
        }
    }
    let truths: Vec<f64> = scenarios
        .iter()
        .map(ScenarioSpec::truth)
        .collect::<Result<_>>()?;
    let per_rep: Vec<Vec<RepRecord>> = (0..first.n_reps)
        .into_par_iter()
        .map(|rep| run_rep(scenarios, &truths, rep))
        .collect();
    let mut out = Vec::with_capacity(scenarios.len());
    for (k, s) in scenarios.iter().enumerate() {
        let records: Vec<RepRecord> = per_rep.iter().map(|r| r[k].clone()).collect();
        let learners = learner_descriptions(s)?;
        out.push(MCResult {
            scenario: s.clone(),
            truth: truths[k],
            summary: McSummary::from_records(truths[k], &records),
            records,
            learners,
        });
    }
    Ok(out)
}

fn learner_descriptions(s: &ScenarioSpec) -> Result<Vec<String>> {
    if s.method == Method::Oracle {
        return Ok(vec!["true nuisance functions".into()]);
    }
    let mut out = Vec::new();
    for t in s.estimand_spec()?.targets() {
        let p = build_problem(&t, s.q)?;
        for (role, spec) in p.roles.iter().zip(s.specs_for(&p)) {
            out.push(format!("{t} {}: {}", role.name, spec.describe()));
        }
    }
    Ok(out)
}

struct FitCache {
    entries: Vec<(String, FittedNuisance)>,
}

impl FitCache {
    fn get_or_fit(
        &mut self,
        key: String,
        fit: impl FnOnce() -> Result<FittedNuisance>,
    ) -> Result<&FittedNuisance> {
        if let Some(pos) = self.entries.iter().position(|(k, _)| *k == key) {
            return Ok(&self.entries[pos].1);
        }
        let f = fit()?;
        self.entries.push((key, f));
        Ok(&self.entries.last().expect("just pushed").1)
    }
}

fn run_rep(scenarios: &[ScenarioSpec], truths: &[f64], rep: usize) -> Vec<RepRecord> {
    let first = &scenarios[0];
    let seed = first.base_seed.wrapping_add(rep as u64);
    let blank = RepRecord {
        rep,
        seed,
        estimate: None,
        se: None,
        ci_lo: None,
        ci_hi: None,
        covered: None,
        grid_spacing: None,
        error: None,
    };
    let data = match generate(&DgpSpec {
        family: first.family,
        n: first.n,
        seed,
    }) {
        Ok(d) => d,
        Err(e) => {
            return scenarios
                .iter()
                .map(|_| RepRecord {
                    error: Some(e.to_string()),
                    ..blank.clone()
                })
                .collect()
        }
    };
    let mut cache = FitCache {
        entries: Vec::new(),
    };
    scenarios
        .iter()
        .zip(truths)
        .map(
            |(s, &truth)| match rep_estimate(s, &data, seed, &mut cache) {
                Ok((est, se, ci, spacing)) => RepRecord {
                    estimate: Some(est),
                    se: Some(se),
                    ci_lo: Some(ci.0),
                    ci_hi: Some(ci.1),
                    covered: Some(ci.0 <= truth && truth <= ci.1),
                    grid_spacing: spacing,
                    ..blank.clone()
                },
                Err(e) => RepRecord {
                    error: Some(e.to_string()),
                    ..blank.clone()
                },
            },
        )
        .collect()
}

type RepOutcome = (f64, f64, (f64, f64), Option<f64>);

fn rep_estimate(
    s: &ScenarioSpec,
    data: &Dataset,
    seed: u64,
    cache: &mut FitCache,
) -> Result<RepOutcome> {
    let spec = s.estimand_spec()?;
    let grid = match s.grid {
        Some(r) => Some(outcome_grid(data, r)?),
        None => None,
    };
    let mut reports = Vec::new();
    for t in spec.targets() {
        let problem = build_problem(&t, s.q)?;
        let obs = Observations::new(data, &t)?;
        let specs = s.specs_for(&problem);
        let key = if s.method == Method::Oracle {
            format!("oracle {t}")
        } else {
            format!("{t} {:?} k={}", specs, s.k_folds)
        };
        let nuisance = cache.get_or_fit(key, || {
            if s.method == Method::Oracle {
                oracle_nuisance(s.family, &problem, data)
            } else if s.k_folds >= 2 {
                let folds = make_folds(data.n(), s.k_folds, seed ^ 0xF01D)?;
                crossfit(data, &folds, &problem.roles, &specs)
            } else {
                fit_in_sample(data, &problem.roles, &specs)
            }
        })?;
        let report = match s.method {
            Method::InverseCdf => inverse_cdf_obs(
                &problem,
                &obs,
                nuisance,
                grid.as_ref().expect("validated"),
                DEFAULT_LEVEL,
            )?,
            m => estimate_obs(&problem, &obs, nuisance, m, DEFAULT_LEVEL)?,
        };
        reports.push(report);
    }
    let (est, se, ci) = match (&spec, reports.as_slice()) {
        (EstimandSpec::Quantile(_), [r]) => (r.theta, r.se, r.ci),
        (EstimandSpec::Effect { name, .. }, [a, b]) => {
            let e = effect(name, a, b)?;
            (e.estimate, e.se, e.ci)
        }
        _ => unreachable!("one report per target"),
    };
    let spacing = grid.as_ref().map(|g| cell_width(g, est));
    Ok((est, se, ci, spacing))
}

/// Width of the grid cell containing `x` (nearest edge cell outside).
pub fn cell_width(grid: &[f64], x: f64) -> f64 {
    let r = grid.len();
    let k = grid.partition_point(|&g| g <= x).clamp(1, r - 1);
    grid[k] - grid[k - 1]
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

/// One row per replication, scenarios stacked.
pub fn write_records_csv(results: &[MCResult], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    w.write_record([
        "scenario",
        "rep",
        "seed",
        "estimate",
        "se",
        "ci_lo",
        "ci_hi",
        "covered",
        "grid_spacing",
        "error",
    ])
    .map_err(|e| Error::Io(e.to_string()))?;
    for result in results {
        for r in &result.records {
            w.write_record([
                result.scenario.id.clone(),
                r.rep.to_string(),
                r.seed.to_string(),
                opt(r.estimate),
                opt(r.se),
                opt(r.ci_lo),
                opt(r.ci_hi),
                r.covered.map_or_else(String::new, |c| c.to_string()),
                opt(r.grid_spacing),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(|e| Error::Io(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Long-format rows (scenario, estimator, q, metric, value) for plotting.
pub fn write_plot_csv(results: &[MCResult], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "scenario,estimator,q,metric,value")?;
    for r in results {
        let s = &r.summary;
        let estimator = match r.scenario.grid {
            Some(g) => format!("{}/R={g}", r.scenario.method),
            None => r.scenario.method.to_string(),
        };
        let metrics = [
            ("truth", s.truth),
            ("bias", s.bias),
            ("sd", s.sd),
            ("mc_se", s.mc_se),
            ("rmse", s.rmse),
            ("mae", s.mae),
            ("coverage", s.coverage),
            ("mean_se", s.mean_se),
            ("n_failed", s.n_failed as f64),
        ];
        for (name, v) in metrics {
            writeln!(
                f,
                "{},{},{:?},{},{:?}",
                r.scenario.id, estimator, r.scenario.q, name, v
            )?;
        }
        for rec in &r.records {
            if let Some(e) = rec.estimate {
                writeln!(
                    f,
                    "{},{},{:?},estimate,{:?}",
                    r.scenario.id, estimator, r.scenario.q, e
                )?;
            }
        }
    }
    f.flush()?;
    Ok(())
}
