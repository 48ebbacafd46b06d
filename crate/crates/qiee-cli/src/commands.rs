//! The three subcommands. Each writes its artifacts into the output
//! directory and returns a short table for the terminal.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use qiee::dataset::{load_csv, make_folds, Dataset};
use qiee::engine::MomentProblem;
use qiee::estimands::{
    build_problem, effect, estimate, inverse_cdf_estimate, EstimandSpec, EstimateReport, Method,
    DEFAULT_LEVEL,
};
use qiee::inference::{bootstrap_effect_variance, bootstrap_variance, rearrange, wald_ci};
use qiee::nuisance::{crossfit, fit_in_sample, outcome_grid, FittedNuisance, LearnerSpec};
use qiee::simlab::{
    oracle_truth_spec, parse_scenario, run_monte_carlo_multi, with_grid, write_plot_csv,
    write_records_csv, DgpFamily, MCResult, McSummary, ScenarioSpec, DEFAULT_FOLDS,
};
use serde::{Deserialize, Serialize};

use crate::config::{
    Command, RunConfig, ScenarioRef, VarianceChoice, DEFAULT_BOOT, DEFAULT_ESTIMATE_SEED,
};
use crate::CliError;

pub const RECORDS_FILE: &str = "records.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PLOT_FILE: &str = "plot.csv";
pub const REPORT_FILE: &str = "report.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const ORACLE_CACHE_FILE: &str = "oracle-cache.json";
pub const DEFAULT_OUT: &str = "qiee-out";
pub const DEFAULT_GRID: usize = 100;

pub fn run(cfg: &RunConfig) -> Result<String, CliError> {
    cfg.check()?;
    match cfg.command {
        Command::Simulate => simulate(cfg),
        Command::Estimate => estimate_cmd(cfg),
        Command::Oracle => oracle(cfg),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn reject(present: bool, what: &str, why: &str) -> Result<(), CliError> {
    if present {
        return Err(CliError::Usage(format!(
            "{what} is not accepted by this command: {why}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: ScenarioSpec,
    pub truth: f64,
    pub summary: McSummary,
    pub learners: Vec<String>,
    pub stable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateReport {
    pub command: Command,
    pub results: Vec<ScenarioSummary>,
}

pub fn resolve_scenarios(cfg: &RunConfig) -> Result<Vec<ScenarioSpec>, CliError> {
    if cfg.scenarios.is_empty() {
        return Err(CliError::Usage("no scenarios given".into()));
    }
    let mut out = Vec::with_capacity(cfg.scenarios.len());
    for r in &cfg.scenarios {
        let mut s = match r {
            ScenarioRef::Id(id) => {
                parse_scenario(id).map_err(|e| CliError::Usage(e.to_string()))?
            }
            ScenarioRef::Inline(s) => (**s).clone(),
        };
        if let Some(v) = cfg.reps {
            s.n_reps = v;
        }
        if let Some(v) = cfg.seed {
            s.base_seed = v;
        }
        if let Some(v) = cfg.folds {
            s.k_folds = v;
        }
        if let Some(v) = cfg.n {
            s.n = v;
        }
        s.validate()
            .map_err(|e| CliError::Usage(format!("scenario `{}`: {e}", s.id)))?;
        out.push(s);
    }
    Ok(out)
}

fn simulate(cfg: &RunConfig) -> Result<String, CliError> {
    let why = "simulation scenarios encode it in their id";
    reject(!cfg.q.is_empty(), "--q", why)?;
    reject(cfg.method.is_some(), "--method", why)?;
    reject(cfg.grid.is_some(), "--grid", why)?;
    reject(
        cfg.data.is_some() || cfg.estimand.is_some(),
        "a data file or estimand",
        why,
    )?;
    reject(
        !cfg.learners.is_empty(),
        "learner overrides",
        "the catalog runs the built-in learners",
    )?;
    let scenarios = resolve_scenarios(cfg)?;
    let dir = out_dir(cfg)?;

    // Scenarios sharing design, size, replications and seed share data.
    let mut groups: Vec<Vec<(usize, ScenarioSpec)>> = Vec::new();
    for (k, s) in scenarios.into_iter().enumerate() {
        match groups.iter_mut().find(|g| {
            let h = &g[0].1;
            h.family == s.family && h.n == s.n && h.n_reps == s.n_reps && h.base_seed == s.base_seed
        }) {
            Some(g) => g.push((k, s)),
            None => groups.push(vec![(k, s)]),
        }
    }
    let mut indexed: Vec<(usize, MCResult)> = Vec::new();
    for g in &groups {
        let specs: Vec<ScenarioSpec> = g.iter().map(|(_, s)| s.clone()).collect();
        let res = run_monte_carlo_multi(&specs)?;
        indexed.extend(g.iter().map(|(k, _)| *k).zip(res));
    }
    indexed.sort_by_key(|(k, _)| *k);
    let results: Vec<MCResult> = indexed.into_iter().map(|(_, r)| r).collect();

    write_records_csv(&results, dir.join(RECORDS_FILE))?;
    if cfg.emit_plots {
        write_plot_csv(&results, dir.join(PLOT_FILE))?;
    }
    let report = SimulateReport {
        command: Command::Simulate,
        results: results
            .iter()
            .map(|r| ScenarioSummary {
                scenario: r.scenario.clone(),
                truth: r.truth,
                summary: r.summary.clone(),
                learners: r.learners.clone(),
                stable: r.check_stability().is_ok(),
            })
            .collect(),
    };
    write_json(&dir.join(SUMMARY_FILE), &report)?;

    let mut table = String::new();
    writeln!(
        table,
        "{:<40} {:>9} {:>9} {:>8} {:>8} {:>6} {:>5}",
        "scenario", "truth", "bias", "sd", "rmse", "cover", "fail"
    )
    .ok();
    for r in &results {
        let s = &r.summary;
        writeln!(
            table,
            "{:<40} {:>9.4} {:>9.4} {:>8.4} {:>8.4} {:>6.3} {:>5}",
            r.scenario.id, s.truth, s.bias, s.sd, s.rmse, s.coverage, s.n_failed
        )
        .ok();
    }
    let unstable: Vec<String> = results
        .iter()
        .filter_map(|r| {
            r.check_stability()
                .err()
                .map(|e| format!("{}: {e}", r.scenario.id))
        })
        .collect();
    if !unstable.is_empty() {
        return Err(CliError::Runtime(format!(
            "{table}artifacts written to {}\n{}",
            dir.display(),
            unstable.join("\n")
        )));
    }
    Ok(table)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateRow {
    pub q: f64,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Monotone-rearranged estimate, when requested.
    pub rearranged: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateOutput {
    pub command: Command,
    pub estimand: String,
    pub method: Method,
    pub variance: VarianceChoice,
    pub level: f64,
    pub folds: usize,
    pub seed: u64,
    pub rows: Vec<EstimateRow>,
    /// Per-target, per-q reports.
    pub reports: Vec<EstimateReport>,
}

struct FittedTarget {
    problem: MomentProblem,
    specs: Vec<LearnerSpec>,
    nuisance: FittedNuisance,
}

fn target_specs(problem: &MomentProblem, cfg: &RunConfig) -> Vec<LearnerSpec> {
    problem
        .roles
        .iter()
        .map(|role| {
            let spec = cfg
                .learners
                .get(&role.name)
                .cloned()
                .unwrap_or_else(|| role.spec.clone());
            match cfg.grid {
                Some(r) if cfg.method != Some(Method::InverseCdf) => with_grid(spec, r),
                _ => spec,
            }
        })
        .collect()
}

fn estimate_cmd(cfg: &RunConfig) -> Result<String, CliError> {
    let method = cfg.method.unwrap_or(Method::Debiased);
    if method == Method::Oracle {
        return Err(CliError::Usage(
            "the oracle method needs the true nuisances of a simulation design; use `simulate`"
                .into(),
        ));
    }
    reject(!cfg.scenarios.is_empty(), "scenarios", "use `simulate`")?;
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| CliError::Usage("estimate needs a data file".into()))?;
    let estimand = cfg
        .estimand
        .as_ref()
        .ok_or_else(|| CliError::Usage("estimate needs an estimand".into()))?;
    let spec: EstimandSpec = estimand
        .parse()
        .map_err(|e: qiee::Error| CliError::Usage(e.to_string()))?;
    let mut qs = if cfg.q.is_empty() {
        vec![0.5]
    } else {
        cfg.q.clone()
    };
    qs.sort_by(f64::total_cmp);
    qs.dedup();
    let level = cfg.level.unwrap_or(DEFAULT_LEVEL);
    let folds = cfg.folds.unwrap_or(DEFAULT_FOLDS);
    let seed = cfg.seed.unwrap_or(DEFAULT_ESTIMATE_SEED);
    let problems: Vec<MomentProblem> = spec
        .targets()
        .iter()
        .map(|t| build_problem(t, qs[0]))
        .collect::<qiee::Result<_>>()?;
    if let Some(bad) = cfg.learners.keys().find(|k| {
        !problems
            .iter()
            .any(|p| p.roles.iter().any(|r| &r.name == *k))
    }) {
        return Err(CliError::Usage(format!(
            "`{estimand}` has no role named `{bad}`"
        )));
    }
    let data = load_csv(path, cfg.roles.clone())?;
    let mut fitted = Vec::with_capacity(problems.len());
    for problem in problems {
        let specs = target_specs(&problem, cfg);
        let nuisance = fit(&data, &problem, &specs, folds, seed)?;
        fitted.push(FittedTarget {
            problem,
            specs,
            nuisance,
        });
    }
    let grid = match method {
        Method::InverseCdf => Some(outcome_grid(&data, cfg.grid.unwrap_or(DEFAULT_GRID))?),
        _ => None,
    };

    // reports[target][q]
    let mut reports: Vec<Vec<EstimateReport>> = Vec::new();
    for f in &fitted {
        let mut per_q = Vec::with_capacity(qs.len());
        for &q in &qs {
            let p = f.problem.with_q(q)?;
            let mut r = match &grid {
                Some(g) => inverse_cdf_estimate(&p, &data, &f.nuisance, g)?,
                None => estimate(&p, &data, &f.nuisance, method)?,
            };
            if level != r.level {
                r.ci = wald_ci(r.theta, r.se, level);
                r.level = level;
            }
            per_q.push(r);
        }
        reports.push(per_q);
    }

    let mut rows = Vec::with_capacity(qs.len());
    for (j, &q) in qs.iter().enumerate() {
        let (est, se) = match &spec {
            EstimandSpec::Quantile(_) => (reports[0][j].theta, reports[0][j].se),
            EstimandSpec::Effect { name, .. } => {
                let e = effect(name, &reports[0][j], &reports[1][j])?;
                (e.estimate, e.se)
            }
        };
        let se = match cfg.variance {
            VarianceChoice::Eif => se,
            VarianceChoice::Bootstrap => {
                if method != Method::Debiased {
                    return Err(CliError::Usage(
                        "bootstrap variance is available for the debiased method".into(),
                    ));
                }
                let n_boot = cfg.n_boot.unwrap_or(DEFAULT_BOOT);
                let v = match fitted.as_slice() {
                    [a] => {
                        bootstrap_variance(&a.problem.with_q(q)?, &data, &a.specs, n_boot, seed)?
                    }
                    [a, b] => bootstrap_effect_variance(
                        (&a.problem.with_q(q)?, &a.specs),
                        (&b.problem.with_q(q)?, &b.specs),
                        &data,
                        n_boot,
                        seed,
                    )?,
                    _ => unreachable!("estimands have one or two targets"),
                };
                v.se
            }
        };
        let (lo, hi) = wald_ci(est, se, level);
        rows.push(EstimateRow {
            q,
            estimate: est,
            se,
            ci_lo: lo,
            ci_hi: hi,
            rearranged: None,
        });
    }
    if cfg.rearrange && qs.len() >= 2 {
        let curves: Vec<Vec<f64>> = reports
            .iter()
            .map(|per_q| rearrange(&qs, &per_q.iter().map(|r| r.theta).collect::<Vec<_>>()))
            .collect::<qiee::Result<_>>()?;
        for (j, row) in rows.iter_mut().enumerate() {
            row.rearranged = Some(match curves.as_slice() {
                [a] => a[j],
                [a, b] => a[j] - b[j],
                _ => unreachable!("estimands have one or two targets"),
            });
        }
    }

    let out = EstimateOutput {
        command: Command::Estimate,
        estimand: estimand.clone(),
        method,
        variance: cfg.variance,
        level,
        folds,
        seed,
        rows,
        reports: reports.into_iter().flatten().collect(),
    };
    let dir = out_dir(cfg)?;
    write_json(&dir.join(REPORT_FILE), &out)?;

    let mut table = String::new();
    writeln!(table, "{estimand} ({method}, {:.0}% CI)", 100.0 * level).ok();
    writeln!(
        table,
        "{:>6} {:>11} {:>10} {:>11} {:>11} {:>11}",
        "q", "estimate", "se", "ci_lo", "ci_hi", "rearranged"
    )
    .ok();
    for r in &out.rows {
        let re = r
            .rearranged
            .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        writeln!(
            table,
            "{:>6.3} {:>11.4} {:>10.4} {:>11.4} {:>11.4} {:>11}",
            r.q, r.estimate, r.se, r.ci_lo, r.ci_hi, re
        )
        .ok();
    }
    Ok(table)
}

fn fit(
    data: &Dataset,
    problem: &MomentProblem,
    specs: &[LearnerSpec],
    folds: usize,
    seed: u64,
) -> qiee::Result<FittedNuisance> {
    if folds >= 2 {
        let f = make_folds(data.n(), folds, seed)?;
        crossfit(data, &f, &problem.roles, specs)
    } else {
        fit_in_sample(data, &problem.roles, specs)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRow {
    pub q: f64,
    pub truth: f64,
    /// Whether the value came from the cache file in the output directory.
    pub cached: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthTable {
    pub command: Command,
    pub dgp: String,
    pub estimand: String,
    pub rows: Vec<TruthRow>,
}

fn cache_key(dgp: DgpFamily, estimand: &str, q: f64) -> String {
    format!("{}|{estimand}|{q:?}", dgp.label())
}

fn oracle(cfg: &RunConfig) -> Result<String, CliError> {
    let label = cfg
        .dgp
        .as_ref()
        .ok_or_else(|| CliError::Usage("oracle needs a design (--dgp)".into()))?;
    let family = DgpFamily::from_label(label).map_err(|e| CliError::Usage(e.to_string()))?;
    let estimand = cfg
        .estimand
        .as_ref()
        .ok_or_else(|| CliError::Usage("oracle needs an estimand".into()))?;
    let spec: EstimandSpec = estimand
        .parse()
        .map_err(|e: qiee::Error| CliError::Usage(e.to_string()))?;
    let qs = if cfg.q.is_empty() {
        vec![0.5]
    } else {
        cfg.q.clone()
    };
    let dir = out_dir(cfg)?;
    let cache_path = dir.join(ORACLE_CACHE_FILE);
    let mut cache: BTreeMap<String, f64> = match std::fs::read_to_string(&cache_path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| {
            CliError::Data(format!(
                "corrupt oracle cache {}: {e}",
                cache_path.display()
            ))
        })?,
        Err(_) => BTreeMap::new(),
    };
    let mut rows = Vec::with_capacity(qs.len());
    for &q in &qs {
        let key = cache_key(family, estimand, q);
        let (truth, cached) = match cache.get(&key) {
            Some(&v) => (v, true),
            None => {
                let v = oracle_truth_spec(family, &spec, q)
                    .map_err(|e| CliError::Usage(e.to_string()))?;
                cache.insert(key, v);
                (v, false)
            }
        };
        rows.push(TruthRow { q, truth, cached });
    }
    write_json(&cache_path, &cache)?;
    let table = TruthTable {
        command: Command::Oracle,
        dgp: family.label().to_string(),
        estimand: estimand.clone(),
        rows,
    };
    write_json(&dir.join(TRUTH_FILE), &table)?;
    let mut text = String::new();
    writeln!(text, "{} {estimand}", family.label()).ok();
    for r in &table.rows {
        writeln!(
            text,
            "q = {:<6} truth = {:.6}{}",
            r.q,
            r.truth,
            if r.cached { " (cached)" } else { "" }
        )
        .ok();
    }
    Ok(text)
}
