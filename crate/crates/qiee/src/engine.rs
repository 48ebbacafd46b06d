//! Estimating-equation machinery: per-unit moment and adjustment scores,
//! grid-scan plus bisection root finding, the normalizer B and the
//! mixed-bias orthogonality probe.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimands::Target;
use crate::nuisance::{FittedNuisance, LearnerSpec, NuisanceRole, RoleValues};

/// Number of uniform scan points of the solver.
pub const SCAN_POINTS: usize = 512;
/// Default bisection tolerance relative to the bracket width.
pub const REL_TOL: f64 = 1e-6;

/// Observed columns a score needs, detached from the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub(crate) y: Vec<f64>,
    pub(crate) a: Vec<f64>,
    pub(crate) s: Vec<f64>,
    /// Cumulative regimen indicators I(A_1..A_t = a_1..a_t), one row per period.
    pub(crate) follow: Vec<Vec<f64>>,
}

impl Observations {
    pub fn new(data: &Dataset, target: &Target) -> Result<Self> {
        let y = data.outcome()?.to_vec();
        let n = data.n();
        let a = match target {
            Target::Longitudinal { .. } => Vec::new(),
            _ => data.treatment()?.to_vec(),
        };
        let s = match target {
            Target::Truncation { .. } => data
                .survival()
                .ok_or_else(|| Error::Schema("no `survival` role declared".into()))?
                .to_vec(),
            _ => Vec::new(),
        };
        let mut follow = Vec::new();
        if let Target::Longitudinal { regimen } = target {
            let mut cur = vec![1.0; n];
            for (t, &level) in regimen.iter().enumerate() {
                let col = data.time_treatment(t)?;
                for i in 0..n {
                    if col[i] != f64::from(level) {
                        cur[i] = 0.0;
                    }
                }
                follow.push(cur.clone());
            }
        }
        if !matches!(target, Target::Truncation { .. }) && y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integrity("outcome is missing for some units".into()));
        }
        Ok(Observations { y, a, s, follow })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// [min - 0.1 range, max + 0.1 range] over defined outcomes.
    pub fn default_bracket(&self) -> Result<(f64, f64)> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in self.y.iter().filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Err(Error::Estimability("no defined outcomes".into()));
        }
        let pad = 0.1 * (hi - lo);
        if pad > 0.0 {
            Ok((lo - pad, hi + pad))
        } else {
            Ok((lo - 1.0, hi + 1.0))
        }
    }

    pub(crate) fn defined_outcomes(&self) -> Vec<f64> {
        self.y.iter().copied().filter(|v| v.is_finite()).collect()
    }
}

/// A fully assembled estimand: target functional, quantile level, nuisance
/// roles and the mixed-bias pairing of those roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentProblem {
    pub target: Target,
    pub q: f64,
    pub roles: Vec<NuisanceRole>,
    pub mixed_bias_pairs: Vec<(usize, usize)>,
}

impl MomentProblem {
    pub fn new(
        target: Target,
        q: f64,
        roles: Vec<NuisanceRole>,
        pairs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Argument(format!(
                "quantile level {q} outside (0, 1)"
            )));
        }
        let j = roles.len();
        let mut covered = vec![false; j];
        for &(a, b) in &pairs {
            if a >= j || b >= j || a == b {
                return Err(Error::Argument(format!(
                    "invalid mixed-bias pair ({a}, {b})"
                )));
            }
            covered[a] = true;
            covered[b] = true;
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::Argument(
                "mixed-bias pairs must cover every role".into(),
            ));
        }
        Ok(MomentProblem {
            target,
            q,
            roles,
            mixed_bias_pairs: pairs,
        })
    }

    pub fn with_q(&self, q: f64) -> Result<Self> {
        MomentProblem::new(
            self.target.clone(),
            q,
            self.roles.clone(),
            self.mixed_bias_pairs.clone(),
        )
    }

    pub fn default_specs(&self) -> Vec<LearnerSpec> {
        self.roles.iter().map(|r| r.spec.clone()).collect()
    }

    pub fn role_index(&self, name: &str) -> Result<usize> {
        self.roles
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| Error::Argument(format!("no role named `{name}`")))
    }

    fn check_nuisance(&self, obs: &Observations, nuisance: &FittedNuisance) -> Result<()> {
        if nuisance.roles.len() != self.roles.len() {
            return Err(Error::Argument(format!(
                "problem has {} roles but nuisance has {}",
                self.roles.len(),
                nuisance.roles.len()
            )));
        }
        if nuisance.n() != obs.n() {
            return Err(Error::Argument("nuisance and data differ in size".into()));
        }
        Ok(())
    }
}

/// Evaluates empirical scores at arbitrary theta, reusing buffers.
pub struct ScoreEvaluator<'a> {
    problem: &'a MomentProblem,
    obs: &'a Observations,
    nuisance: &'a FittedNuisance,
    values: Vec<Vec<f64>>,
    g_roles: Vec<usize>,
}

impl<'a> ScoreEvaluator<'a> {
    pub fn new(
        problem: &'a MomentProblem,
        obs: &'a Observations,
        nuisance: &'a FittedNuisance,
    ) -> Result<Self> {
        problem.check_nuisance(obs, nuisance)?;
        let values = nuisance
            .roles
            .iter()
            .map(|r| match r {
                RoleValues::Fixed(v) => v.clone(),
                RoleValues::Curve(_) => vec![0.0; obs.n()],
            })
            .collect();
        Ok(ScoreEvaluator {
            problem,
            obs,
            nuisance,
            values,
            g_roles: problem.target.g_roles(),
        })
    }

    fn fill(&mut self, theta: f64, only_g: bool) {
        for (j, r) in self.nuisance.roles.iter().enumerate() {
            if only_g && !self.g_roles.contains(&j) {
                continue;
            }
            if let RoleValues::Curve(c) = r {
                c.fill(theta, &mut self.values[j]);
            }
        }
    }

    /// Per-unit (g, phi) at (tau, theta).
    pub fn unit_scores(&mut self, theta: f64, tau: f64) -> (Vec<f64>, Vec<f64>) {
        self.fill(theta, false);
        unit_scores_from(self.problem, self.obs, &self.values, tau, theta)
    }

    /// P_n[g] (plug-in) or P_n[g + phi] (debiased) at tau = q.
    pub fn mean_score(&mut self, theta: f64, with_phi: bool) -> Result<f64> {
        self.fill(theta, !with_phi);
        let target = &self.problem.target;
        let tau = self.problem.q;
        let n = self.obs.n();
        let mut h = vec![0.0; self.values.len()];
        let mut sum = 0.0;
        for i in 0..n {
            for (j, v) in self.values.iter().enumerate() {
                h[j] = v[i];
            }
            let mut s = target.g(self.obs, i, &h, tau, theta);
            if with_phi {
                s += target.phi(self.obs, i, &h, tau, theta);
            }
            if !s.is_finite() {
                return Err(Error::Evaluation { unit: i, theta });
            }
            sum += s;
        }
        Ok(sum / n as f64)
    }

    /// Role values and theta-derivatives at theta, unit-major.
    fn values_and_densities(&mut self, theta: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        self.fill(theta, false);
        let n = self.obs.n();
        let dens = self
            .nuisance
            .roles
            .iter()
            .map(|r| match r {
                RoleValues::Fixed(_) => vec![0.0; n],
                RoleValues::Curve(c) => {
                    let mut out = vec![0.0; n];
                    c.fill_density(theta, &mut out);
                    out
                }
            })
            .collect();
        (self.values.clone(), dens)
    }
}

/// Per-unit (g, phi) from role values laid out as values[role][unit].
pub fn unit_scores_from(
    problem: &MomentProblem,
    obs: &Observations,
    values: &[Vec<f64>],
    tau: f64,
    theta: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = obs.n();
    let mut h = vec![0.0; values.len()];
    let mut g = Vec::with_capacity(n);
    let mut phi = Vec::with_capacity(n);
    for i in 0..n {
        for (j, v) in values.iter().enumerate() {
            h[j] = v[i];
        }
        g.push(problem.target.g(obs, i, &h, tau, theta));
        phi.push(problem.target.phi(obs, i, &h, tau, theta));
    }
    (g, phi)
}

/// G_n(theta) = P_n[g(W, q, theta, h)].
pub fn eval_plugin_score(
    problem: &MomentProblem,
    obs: &Observations,
    nuisance: &FittedNuisance,
    theta: f64,
) -> Result<f64> {
    ScoreEvaluator::new(problem, obs, nuisance)?.mean_score(theta, false)
}

/// P_n[g + phi] at (q, theta).
pub fn eval_debiased_score(
    problem: &MomentProblem,
    obs: &Observations,
    nuisance: &FittedNuisance,
    theta: f64,
) -> Result<f64> {
    ScoreEvaluator::new(problem, obs, nuisance)?.mean_score(theta, true)
}

/// How to pick among several upward crossings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    Smallest,
    /// Interval whose midpoint is closest to the anchor.
    ClosestTo(f64),
}

/// Solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrace {
    pub bracket: (f64, f64),
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Intervals where the score moves from negative to nonnegative.
    pub crossings: Vec<(f64, f64)>,
    pub selected: (f64, f64),
    pub root: f64,
    pub iterations: usize,
    pub width: f64,
}

/// Scans a uniform grid (augmented by `extra` points inside the bracket) for
/// upward sign changes of `score`, then bisects the selected interval until
/// its width is at most `tol` and returns the midpoint.
pub fn solve_ee(
    mut score: impl FnMut(f64) -> Result<f64>,
    bracket: (f64, f64),
    tol: f64,
    extra: &[f64],
    selection: Selection,
) -> Result<(f64, ScoreTrace)> {
    let (lo, hi) = bracket;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Argument(format!("invalid bracket [{lo}, {hi}]")));
    }
    if !(tol > 0.0) {
        return Err(Error::Argument("tolerance must be positive".into()));
    }
    let step = (hi - lo) / (SCAN_POINTS - 1) as f64;
    let mut grid: Vec<f64> = (0..SCAN_POINTS).map(|k| lo + step * k as f64).collect();
    grid[SCAN_POINTS - 1] = hi;
    grid.extend(extra.iter().copied().filter(|&v| v > lo && v < hi));
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut values = Vec::with_capacity(grid.len());
    for &t in &grid {
        values.push(score(t)?);
    }
    let mut crossings = Vec::new();
    for k in 0..grid.len() - 1 {
        if values[k] < 0.0 && values[k + 1] >= 0.0 {
            crossings.push((grid[k], grid[k + 1]));
        }
    }
    if crossings.is_empty() {
        let (at, min_abs) = grid
            .iter()
            .zip(&values)
            .map(|(&t, &v)| (t, v.abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("grid is non-empty");
        return Err(Error::Bracketing {
            lo,
            hi,
            min_abs,
            at,
        });
    }
    let selected = match selection {
        Selection::Smallest => crossings[0],
        Selection::ClosestTo(anchor) => *crossings
            .iter()
            .min_by(|x, y| {
                let dx = (0.5 * (x.0 + x.1) - anchor).abs();
                let dy = (0.5 * (y.0 + y.1) - anchor).abs();
                dx.total_cmp(&dy)
            })
            .expect("crossings is non-empty"),
    };
    let (mut a, mut b) = selected;
    let mut iterations = 0;
    while b - a > tol {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if score(m)? < 0.0 {
            a = m;
        } else {
            b = m;
        }
        iterations += 1;
    }
    let root = 0.5 * (a + b);
    Ok((
        root,
        ScoreTrace {
            bracket,
            grid,
            values,
            crossings,
            selected,
            root,
            iterations,
            width: b - a,
        },
    ))
}

/// Solves the plug-in (`with_phi = false`) or debiased equation with the
/// default bracket, tolerance and outcome-augmented scan.
pub fn solve_problem(
    problem: &MomentProblem,
    obs: &Observations,
    nuisance: &FittedNuisance,
    with_phi: bool,
    selection: Selection,
) -> Result<(f64, ScoreTrace)> {
    let mut ev = ScoreEvaluator::new(problem, obs, nuisance)?;
    let bracket = obs.default_bracket()?;
    let tol = REL_TOL * (bracket.1 - bracket.0);
    let extra = obs.defined_outcomes();
    solve_ee(
        |t| ev.mean_score(t, with_phi),
        bracket,
        tol,
        &extra,
        selection,
    )
}

/// B-hat: empirical mean of the theta-derivative of the identifying moment.
pub fn estimate_b(
    problem: &MomentProblem,
    obs: &Observations,
    nuisance: &FittedNuisance,
    theta: f64,
) -> Result<f64> {
    let mut ev = ScoreEvaluator::new(problem, obs, nuisance)?;
    let (vals, dens) = ev.values_and_densities(theta);
    let n = obs.n();
    let mut h = vec![0.0; vals.len()];
    let mut dh = vec![0.0; vals.len()];
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..vals.len() {
            h[j] = vals[j][i];
            dh[j] = dens[j][i];
        }
        sum += problem.target.b_unit(&h, &dh);
    }
    let b = sum / n as f64;
    if !(b > 0.0) || !b.is_finite() {
        return Err(Error::Degeneracy(format!(
            "normalizer B = {b} at theta = {theta}; the CDF is flat there"
        )));
    }
    Ok(b)
}

/// Role values at theta, laid out values[role][unit].
pub fn role_values_at(nuisance: &FittedNuisance, theta: f64) -> Vec<Vec<f64>> {
    let n = nuisance.n();
    nuisance
        .roles
        .iter()
        .map(|r| match r {
            RoleValues::Fixed(v) => v.clone(),
            RoleValues::Curve(c) => {
                let mut out = vec![0.0; n];
                c.fill(theta, &mut out);
                out
            }
        })
        .collect()
}

/// Bias curve of the orthogonality probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCurve {
    pub roles: Vec<usize>,
    pub eps: Vec<f64>,
    /// Mean change of the influence function psi.
    pub delta: Vec<f64>,
    /// Monte Carlo standard error of each delta.
    pub noise: Vec<f64>,
    /// Least-squares slope of log|delta| on log eps.
    pub slope: f64,
}

/// Perturbs the chosen roles by h -> h + eps h (1 - h) at fixed theta and
/// reports the mean change of psi = -(g + phi) / B relative to the
/// unperturbed nuisances (typically the true ones).
pub fn orthogonality_probe(
    problem: &MomentProblem,
    obs: &Observations,
    truth: &FittedNuisance,
    theta: f64,
    roles: &[usize],
    eps: &[f64],
) -> Result<ProbeCurve> {
    let probe = Probe::new(problem, obs, truth, theta)?;
    let changes = eps
        .iter()
        .map(|&e| probe.unit_changes(roles, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(curve(roles, eps, &changes))
}

/// Second-order part of a joint perturbation of two roles: the per-unit
/// change under the joint shift minus the changes under each single shift.
/// The single-role changes have mean zero when the other role is true, so
/// this has the same mean as the joint change without its first-order noise.
pub fn interaction_probe(
    problem: &MomentProblem,
    obs: &Observations,
    truth: &FittedNuisance,
    theta: f64,
    pair: (usize, usize),
    eps: &[f64],
) -> Result<ProbeCurve> {
    let probe = Probe::new(problem, obs, truth, theta)?;
    let (j, k) = pair;
    let changes = eps
        .iter()
        .map(|&e| {
            let joint = probe.unit_changes(&[j, k], e)?;
            let a = probe.unit_changes(&[j], e)?;
            let b = probe.unit_changes(&[k], e)?;
            Ok((0..joint.len()).map(|i| joint[i] - a[i] - b[i]).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(curve(&[j, k], eps, &changes))
}

struct Probe<'a> {
    problem: &'a MomentProblem,
    obs: &'a Observations,
    theta: f64,
    b: f64,
    base: Vec<Vec<f64>>,
    score0: Vec<f64>,
}

impl<'a> Probe<'a> {
    fn new(
        problem: &'a MomentProblem,
        obs: &'a Observations,
        truth: &FittedNuisance,
        theta: f64,
    ) -> Result<Self> {
        problem.check_nuisance(obs, truth)?;
        let b = estimate_b(problem, obs, truth, theta)?;
        let base = role_values_at(truth, theta);
        let (g0, p0) = unit_scores_from(problem, obs, &base, problem.q, theta);
        let score0 = g0.iter().zip(&p0).map(|(g, p)| g + p).collect();
        Ok(Probe {
            problem,
            obs,
            theta,
            b,
            base,
            score0,
        })
    }

    /// Per-unit change of psi when `roles` are shifted by `eps`.
    fn unit_changes(&self, roles: &[usize], eps: f64) -> Result<Vec<f64>> {
        if roles.iter().any(|&j| j >= self.problem.roles.len()) {
            return Err(Error::Argument("probe role out of range".into()));
        }
        let mut vals = self.base.clone();
        for &j in roles {
            for v in &mut vals[j] {
                let p = *v + eps * *v * (1.0 - *v);
                if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                    return Err(Error::Perturbation(format!(
                        "role {j} value {v} with eps {eps} gives {p}"
                    )));
                }
                *v = p;
            }
        }
        let (g1, p1) = unit_scores_from(self.problem, self.obs, &vals, self.problem.q, self.theta);
        Ok((0..self.obs.n())
            .map(|i| -((g1[i] + p1[i]) - self.score0[i]) / self.b)
            .collect())
    }
}

fn curve(roles: &[usize], eps: &[f64], changes: &[Vec<f64>]) -> ProbeCurve {
    let mut delta = Vec::with_capacity(eps.len());
    let mut noise = Vec::with_capacity(eps.len());
    for d in changes {
        delta.push(crate::math::mean(d));
        noise.push((crate::math::variance(d) / d.len() as f64).sqrt());
    }
    let slope = log_log_slope(eps, &delta);
    ProbeCurve {
        roles: roles.to_vec(),
        eps: eps.to_vec(),
        delta,
        noise,
        slope,
    }
}

fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && b.abs() > 0.0)
        .map(|(a, b)| (a.ln(), b.abs().ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}
