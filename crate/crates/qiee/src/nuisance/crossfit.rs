//! Role-driven nuisance fitting, either cross-fitted or in-sample.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::cdf::{fit_additive_cdf, ConditionalCdfModel, ResidualLaw};
use super::features::FeatureMatrix;
use super::glm::{constant_binary, fit_binary, BinaryProbModel};
use super::grid::{
    check_grid, fit_grid_cdf_family, grid_density, interpolate, ThetaIndexedCdfModel,
};
use super::{CovariateMap, LearnerKind, LearnerSpec};
use crate::dataset::{Dataset, FoldAssignment};
use crate::error::{Error, Result};
use crate::math::{quantile_sorted, sorted_finite};

/// A binary column referenced by a role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Column {
    Treatment,
    Survival,
    /// Treatment at time index t (0-based).
    TimeTreatment(usize),
}

impl Column {
    fn values(self, data: &Dataset) -> Result<&[f64]> {
        match self {
            Column::Treatment => data.treatment(),
            Column::Survival => data
                .survival()
                .ok_or_else(|| Error::Schema("no `survival` role declared".into())),
            Column::TimeTreatment(t) => data.time_treatment(t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub column: Column,
    pub value: f64,
}

/// Which columns form the raw feature vector of a role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeatureSet {
    pub mediators: bool,
    pub covariates: bool,
    /// Include time-varying covariates of the first `time_covariates` periods.
    pub time_covariates: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoleTarget {
    /// P(column = level | features) among filtered units.
    Probability { response: Column, level: f64 },
    /// theta -> P(Y <= theta | features) among filtered units with observed Y.
    OutcomeCdf,
    /// theta -> E[inner(theta) | features] among filtered units, by regressing
    /// the inner role's predictions at grid nodes (regression imputation).
    NestedMean { inner: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceRole {
    pub name: String,
    pub target: RoleTarget,
    pub filter: Vec<Condition>,
    pub features: FeatureSet,
    /// Default learner for this role.
    pub spec: LearnerSpec,
}

impl NuisanceRole {
    pub fn is_curve(&self) -> bool {
        !matches!(self.target, RoleTarget::Probability { .. })
    }
}

/// theta-indexed predictions for every unit.
#[derive(Debug, Clone, PartialEq)]
pub enum Curves {
    LocScale {
        loc: Vec<f64>,
        scale: Vec<f64>,
        law_of: Vec<u32>,
        laws: Vec<Arc<ResidualLaw>>,
    },
    Grid {
        grid: Vec<f64>,
        /// Row-major n x R node values.
        values: Vec<f64>,
    },
}

impl Curves {
    pub fn n(&self) -> usize {
        match self {
            Curves::LocScale { loc, .. } => loc.len(),
            Curves::Grid { grid, values } => values.len() / grid.len(),
        }
    }

    pub fn value(&self, i: usize, theta: f64) -> f64 {
        match self {
            Curves::LocScale {
                loc,
                scale,
                law_of,
                laws,
            } => laws[law_of[i] as usize].cdf((theta - loc[i]) / scale[i]),
            Curves::Grid { grid, values } => {
                let r = grid.len();
                super::grid::interpolate(grid, &values[i * r..(i + 1) * r], theta)
            }
        }
    }

    pub fn density(&self, i: usize, theta: f64) -> f64 {
        match self {
            Curves::LocScale {
                loc,
                scale,
                law_of,
                laws,
            } => laws[law_of[i] as usize].pdf((theta - loc[i]) / scale[i]) / scale[i],
            Curves::Grid { grid, values } => {
                let r = grid.len();
                grid_density(grid, &values[i * r..(i + 1) * r], theta)
            }
        }
    }

    /// Values at theta for all units.
    pub fn fill(&self, theta: f64, out: &mut [f64]) {
        match self {
            Curves::LocScale {
                loc,
                scale,
                law_of,
                laws,
            } => {
                if laws.len() == 1 {
                    let law = &laws[0];
                    for i in 0..out.len() {
                        out[i] = law.cdf((theta - loc[i]) / scale[i]);
                    }
                } else {
                    for i in 0..out.len() {
                        out[i] = laws[law_of[i] as usize].cdf((theta - loc[i]) / scale[i]);
                    }
                }
            }
            Curves::Grid { grid, values } => {
                let r = grid.len();
                if theta <= grid[0] || theta >= grid[r - 1] {
                    let k = if theta <= grid[0] { 0 } else { r - 1 };
                    for i in 0..out.len() {
                        out[i] = values[i * r + k];
                    }
                    return;
                }
                let k = grid.partition_point(|&g| g <= theta) - 1;
                let w = (theta - grid[k]) / (grid[k + 1] - grid[k]);
                for i in 0..out.len() {
                    let a = values[i * r + k];
                    out[i] = a + w * (values[i * r + k + 1] - a);
                }
            }
        }
    }

    pub fn fill_density(&self, theta: f64, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.density(i, theta);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RoleValues {
    Fixed(Vec<f64>),
    Curve(Curves),
}

/// Per-unit nuisance predictions for every role of a problem.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedNuisance {
    pub roles: Vec<RoleValues>,
    pub names: Vec<String>,
    pub provenance: Vec<String>,
    pub folds: Option<FoldAssignment>,
    /// Training-row counts per role and fold.
    pub training_rows: Vec<Vec<usize>>,
}

impl FittedNuisance {
    pub fn n(&self) -> usize {
        match self.roles.first() {
            Some(RoleValues::Fixed(v)) => v.len(),
            Some(RoleValues::Curve(c)) => c.n(),
            None => 0,
        }
    }

    pub fn value(&self, role: usize, unit: usize, theta: f64) -> f64 {
        match &self.roles[role] {
            RoleValues::Fixed(v) => v[unit],
            RoleValues::Curve(c) => c.value(unit, theta),
        }
    }

    pub fn density(&self, role: usize, unit: usize, theta: f64) -> f64 {
        match &self.roles[role] {
            RoleValues::Fixed(_) => 0.0,
            RoleValues::Curve(c) => c.density(unit, theta),
        }
    }
}

enum RoleModel {
    Prob { model: BinaryProbModel, level: f64 },
    Cdf(ConditionalCdfModel),
    Grid(ThetaIndexedCdfModel),
}

impl RoleModel {
    fn curve_value(&self, raw: &[f64], theta: f64) -> f64 {
        match self {
            RoleModel::Prob { .. } => unreachable!("probability roles are not theta-indexed"),
            RoleModel::Cdf(m) => m.cdf(raw, theta),
            RoleModel::Grid(m) => m.eval(raw, theta),
        }
    }

    fn n_train(&self) -> usize {
        match self {
            RoleModel::Prob { model, .. } => model.n_train,
            RoleModel::Cdf(m) => m.n_train,
            RoleModel::Grid(_) => 0,
        }
    }
}

/// Grid nodes at the (0.05 + 0.9 (r-1)/(R-1)) empirical quantiles of the
/// observed outcomes; tied nodes are merged.
pub fn outcome_grid(data: &Dataset, n_grid: usize) -> Result<Vec<f64>> {
    if n_grid < 2 {
        return Err(Error::Argument("grid needs at least two nodes".into()));
    }
    let ys = sorted_finite(data.outcome()?);
    if ys.is_empty() {
        return Err(Error::Estimability("no observed outcomes".into()));
    }
    let mut grid: Vec<f64> = (0..n_grid)
        .map(|r| quantile_sorted(&ys, 0.05 + 0.9 * r as f64 / (n_grid - 1) as f64))
        .collect();
    grid.dedup();
    check_grid(&grid)?;
    Ok(grid)
}

/// Raw features of a role for all n units.
fn role_features(data: &Dataset, set: &FeatureSet, map: CovariateMap) -> Result<FeatureMatrix> {
    let roles = data.roles();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    if set.mediators {
        if roles.mediators.is_empty() {
            return Err(Error::Schema("no `mediator` role declared".into()));
        }
        for m in &roles.mediators {
            cols.push(data.column(m)?.to_vec());
        }
    }
    if set.covariates {
        let base: Vec<&[f64]> = roles
            .covariates
            .iter()
            .map(|c| data.column(c))
            .collect::<Result<_>>()?;
        match map {
            CovariateMap::Raw => cols.extend(base.iter().map(|c| c.to_vec())),
            CovariateMap::Misspecified => {
                if base.len() != 4 {
                    return Err(Error::Argument(
                        "the covariate transform needs exactly four covariates".into(),
                    ));
                }
                let mut t = vec![Vec::with_capacity(data.n()); 4];
                for i in 0..data.n() {
                    let row = crate::simlab::misspecify_row([
                        base[0][i], base[1][i], base[2][i], base[3][i],
                    ]);
                    for k in 0..4 {
                        t[k].push(row[k]);
                    }
                }
                cols.extend(t);
            }
        }
    }
    if set.time_covariates > 0 {
        if roles.time_covariates.len() < set.time_covariates {
            return Err(Error::Schema(format!(
                "time-varying covariates needed through period {}",
                set.time_covariates
            )));
        }
        if map == CovariateMap::Misspecified {
            return Err(Error::Argument(
                "the covariate transform is defined for the four baseline covariates only".into(),
            ));
        }
        for period in &roles.time_covariates[..set.time_covariates] {
            for c in period {
                cols.push(data.column(c)?.to_vec());
            }
        }
    }
    let slices: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    let all: Vec<usize> = (0..data.n()).collect();
    Ok(FeatureMatrix::from_columns(&slices, &all))
}

fn passes(data: &Dataset, conds: &[Condition], i: usize) -> Result<bool> {
    for c in conds {
        if c.column.values(data)?[i] != c.value {
            return Ok(false);
        }
    }
    Ok(true)
}

struct Prepared<'a> {
    role: &'a NuisanceRole,
    spec: &'a LearnerSpec,
    features: FeatureMatrix,
    /// Units eligible for training (filter and, for outcome roles, observed Y).
    eligible: Vec<bool>,
    grid: Option<Vec<f64>>,
}

fn prepare<'a>(
    data: &Dataset,
    roles: &'a [NuisanceRole],
    specs: &'a [LearnerSpec],
) -> Result<Vec<Prepared<'a>>> {
    if roles.len() != specs.len() {
        return Err(Error::Argument(format!(
            "{} roles but {} learner specs",
            roles.len(),
            specs.len()
        )));
    }
    let y = data.outcome()?;
    let mut out = Vec::with_capacity(roles.len());
    for (j, (role, spec)) in roles.iter().zip(specs).enumerate() {
        spec.validate()?;
        let features = role_features(data, &role.features, spec.covariates)?;
        let mut eligible = Vec::with_capacity(data.n());
        for i in 0..data.n() {
            let mut ok = passes(data, &role.filter, i)?;
            if role.target == RoleTarget::OutcomeCdf {
                ok &= y[i].is_finite();
            }
            eligible.push(ok);
        }
        let grid = match role.target {
            RoleTarget::Probability { response, .. } => {
                response.values(data)?;
                if spec.kind != LearnerKind::LogisticGlm && spec.kind != LearnerKind::ProbitGlm {
                    return Err(Error::Argument(format!(
                        "role `{}` needs a binary learner, got {}",
                        role.name,
                        spec.describe()
                    )));
                }
                None
            }
            RoleTarget::OutcomeCdf => match spec.kind {
                LearnerKind::AdditiveCdf => None,
                LearnerKind::GridCdfFamily => Some(outcome_grid(data, spec.n_grid)?),
                _ => {
                    return Err(Error::Argument(format!(
                        "role `{}` needs a CDF learner, got {}",
                        role.name,
                        spec.describe()
                    )))
                }
            },
            RoleTarget::NestedMean { inner } => {
                if inner == j || inner >= roles.len() {
                    return Err(Error::Argument(format!(
                        "role `{}` has an invalid inner role",
                        role.name
                    )));
                }
                if spec.kind != LearnerKind::GridCdfFamily {
                    return Err(Error::Argument(format!(
                        "nested role `{}` needs a grid-cdf-family learner",
                        role.name
                    )));
                }
                Some(outcome_grid(data, spec.n_grid)?)
            }
        };
        out.push(Prepared {
            role,
            spec,
            features,
            eligible,
            grid,
        });
    }
    Ok(out)
}

/// Order in which roles are fitted: every nested role after its inner role.
fn fit_order(roles: &[NuisanceRole]) -> Result<Vec<usize>> {
    let mut order = Vec::with_capacity(roles.len());
    let mut placed = vec![false; roles.len()];
    while order.len() < roles.len() {
        let before = order.len();
        for (j, r) in roles.iter().enumerate() {
            if placed[j] {
                continue;
            }
            let ready = match r.target {
                RoleTarget::NestedMean { inner } => placed[inner],
                _ => true,
            };
            if ready {
                placed[j] = true;
                order.push(j);
            }
        }
        if order.len() == before {
            return Err(Error::Argument("nested roles form a cycle".into()));
        }
    }
    Ok(order)
}

fn fit_role(
    data: &Dataset,
    p: &Prepared,
    train: &[usize],
    fitted: &[Option<RoleModel>],
    inner_features: Option<&FeatureMatrix>,
) -> Result<RoleModel> {
    let rows: Vec<usize> = train.iter().copied().filter(|&i| p.eligible[i]).collect();
    if rows.is_empty() {
        return Err(Error::Estimability(format!(
            "no training units satisfy the filter of role `{}`",
            p.role.name
        )));
    }
    let x = p.features.select(&rows);
    match p.role.target {
        RoleTarget::Probability { response, level } => {
            let col = response.values(data)?;
            let labels: Vec<f64> = rows
                .iter()
                .map(|&i| if col[i] == 1.0 { 1.0 } else { 0.0 })
                .collect();
            let model = match fit_binary(&x, &labels, p.spec, p.spec.kind, p.spec.clip) {
                Ok(m) => m,
                Err(Error::DegenerateLabels(_)) => constant_binary(&x, labels[0], p.spec.clip),
                Err(e) => return Err(e),
            };
            Ok(RoleModel::Prob { model, level })
        }
        RoleTarget::OutcomeCdf => {
            let y = data.outcome()?;
            let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            match &p.grid {
                None => Ok(RoleModel::Cdf(fit_additive_cdf(&x, &ys, p.spec)?)),
                Some(grid) => {
                    let m = fit_grid_cdf_family(
                        p.spec,
                        &x,
                        |_, theta| {
                            ys.iter()
                                .map(|&v| if v <= theta { 1.0 } else { 0.0 })
                                .collect()
                        },
                        grid,
                    )?;
                    Ok(RoleModel::Grid(m))
                }
            }
        }
        RoleTarget::NestedMean { inner } => {
            let inner_model = fitted[inner].as_ref().expect("inner role fitted first");
            let inner_x = inner_features.expect("nested role needs inner features");
            let grid = p.grid.as_ref().expect("nested role has a grid");
            // Grid inner models are evaluated once per row, not once per node.
            let inner_nodes: Option<(&[f64], Vec<Vec<f64>>)> = match inner_model {
                RoleModel::Grid(m) => Some((
                    m.grid(),
                    rows.iter()
                        .map(|&i| m.node_values(inner_x.row(i)))
                        .collect(),
                )),
                _ => None,
            };
            let m = fit_grid_cdf_family(
                p.spec,
                &x,
                |_, theta| match &inner_nodes {
                    Some((g, values)) => values
                        .iter()
                        .map(|v| interpolate(g, v, theta).clamp(0.0, 1.0))
                        .collect(),
                    None => rows
                        .iter()
                        .map(|&i| {
                            inner_model
                                .curve_value(inner_x.row(i), theta)
                                .clamp(0.0, 1.0)
                        })
                        .collect(),
                },
                grid,
            )?;
            Ok(RoleModel::Grid(m))
        }
    }
}

enum Accum {
    Fixed(Vec<f64>),
    Loc {
        loc: Vec<f64>,
        scale: Vec<f64>,
        law_of: Vec<u32>,
        laws: Vec<Arc<ResidualLaw>>,
    },
    Grid {
        grid: Vec<f64>,
        values: Vec<f64>,
    },
}

fn predict_into(acc: &mut Accum, model: &RoleModel, features: &FeatureMatrix, units: &[usize]) {
    match (acc, model) {
        (Accum::Fixed(out), RoleModel::Prob { model, level }) => {
            for &i in units {
                let p = model.predict_row(features.row(i));
                out[i] = if *level == 1.0 { p } else { 1.0 - p };
            }
        }
        (
            Accum::Loc {
                loc,
                scale,
                law_of,
                laws,
            },
            RoleModel::Cdf(m),
        ) => {
            let idx = laws.len() as u32;
            laws.push(m.law().clone());
            for &i in units {
                let (a, b) = m.loc_scale(features.row(i));
                loc[i] = a;
                scale[i] = b;
                law_of[i] = idx;
            }
        }
        (Accum::Grid { grid, values }, RoleModel::Grid(m)) => {
            let r = grid.len();
            for &i in units {
                let v = m.node_values(features.row(i));
                values[i * r..(i + 1) * r].copy_from_slice(&v);
            }
        }
        _ => unreachable!("accumulator matches role target"),
    }
}

fn run_folds(
    data: &Dataset,
    roles: &[NuisanceRole],
    specs: &[LearnerSpec],
    splits: &[(Vec<usize>, Vec<usize>)],
    folds: Option<FoldAssignment>,
) -> Result<FittedNuisance> {
    let prepared = prepare(data, roles, specs)?;
    let n = data.n();
    let mut accs: Vec<Accum> = prepared
        .iter()
        .map(|p| match (&p.role.target, &p.grid) {
            (RoleTarget::Probability { .. }, _) => Accum::Fixed(vec![f64::NAN; n]),
            (_, None) => Accum::Loc {
                loc: vec![0.0; n],
                scale: vec![1.0; n],
                law_of: vec![0; n],
                laws: Vec::new(),
            },
            (_, Some(g)) => Accum::Grid {
                grid: g.clone(),
                values: vec![0.0; n * g.len()],
            },
        })
        .collect();
    let order = fit_order(roles)?;
    let mut training_rows = vec![Vec::new(); roles.len()];
    for (fold, (train, predict)) in splits.iter().enumerate() {
        let mut models: Vec<Option<RoleModel>> = (0..roles.len()).map(|_| None).collect();
        for &j in &order {
            let p = &prepared[j];
            let inner_x = match p.role.target {
                RoleTarget::NestedMean { inner } => Some(&prepared[inner].features),
                _ => None,
            };
            let model = fit_role(data, p, train, &models, inner_x).map_err(|e| Error::Fit {
                role: p.role.name.clone(),
                fold,
                source: Box::new(e),
            })?;
            training_rows[j].push(if model.n_train() > 0 {
                model.n_train()
            } else {
                train.iter().filter(|&&i| p.eligible[i]).count()
            });
            predict_into(&mut accs[j], &model, &p.features, predict);
            models[j] = Some(model);
        }
    }
    let mode = match &folds {
        Some(f) => format!("cross-fitted, {} folds", f.k),
        None => "in-sample".to_string(),
    };
    let provenance = prepared
        .iter()
        .map(|p| format!("{}: {} [{mode}]", p.role.name, p.spec.describe()))
        .collect();
    let roles_out = accs
        .into_iter()
        .map(|a| match a {
            Accum::Fixed(v) => RoleValues::Fixed(v),
            Accum::Loc {
                loc,
                scale,
                law_of,
                laws,
            } => RoleValues::Curve(Curves::LocScale {
                loc,
                scale,
                law_of,
                laws,
            }),
            Accum::Grid { grid, values } => RoleValues::Curve(Curves::Grid { grid, values }),
        })
        .collect();
    Ok(FittedNuisance {
        roles: roles_out,
        names: roles.iter().map(|r| r.name.clone()).collect(),
        provenance,
        folds,
        training_rows,
    })
}

/// Out-of-fold nuisance predictions: unit i is predicted by models trained on
/// the units outside fold(i).
pub fn crossfit(
    data: &Dataset,
    folds: &FoldAssignment,
    roles: &[NuisanceRole],
    specs: &[LearnerSpec],
) -> Result<FittedNuisance> {
    if folds.n != data.n() {
        return Err(Error::Argument(
            "fold assignment and dataset differ in size".into(),
        ));
    }
    if folds.k < 2 {
        return Err(Error::Argument("cross-fitting needs k >= 2".into()));
    }
    let splits: Vec<_> = (0..folds.k)
        .map(|f| (folds.complement(f), folds.members(f)))
        .collect();
    run_folds(data, roles, specs, &splits, Some(folds.clone()))
}

/// Nuisances trained and predicted on the full sample (parametric route).
pub fn fit_in_sample(
    data: &Dataset,
    roles: &[NuisanceRole],
    specs: &[LearnerSpec],
) -> Result<FittedNuisance> {
    let all: Vec<usize> = (0..data.n()).collect();
    run_folds(data, roles, specs, &[(all.clone(), all)], None)
}
