//! Column-oriented unit table with semantic roles, CSV ingestion and
//! cross-fitting fold assignment.
//!
//! A missing outcome is stored as NaN and is only legal for units whose
//! survival flag is 0.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps semantic roles to column names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Roles {
    pub outcome: Option<String>,
    pub treatment: Option<String>,
    pub mediators: Vec<String>,
    pub survival: Option<String>,
    pub covariates: Vec<String>,
    /// Treatment column per time point, in order.
    pub time_treatments: Vec<String>,
    /// Covariate columns first measured at each time point.
    pub time_covariates: Vec<Vec<String>>,
}

impl Roles {
    fn all_columns(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        out.extend(self.outcome.as_deref());
        out.extend(self.treatment.as_deref());
        out.extend(self.survival.as_deref());
        out.extend(self.mediators.iter().map(String::as_str));
        out.extend(self.covariates.iter().map(String::as_str));
        out.extend(self.time_treatments.iter().map(String::as_str));
        for cols in &self.time_covariates {
            out.extend(cols.iter().map(String::as_str));
        }
        out
    }

    fn binary_columns(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        out.extend(self.treatment.as_deref());
        out.extend(self.survival.as_deref());
        out.extend(self.time_treatments.iter().map(String::as_str));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    roles: Roles,
}

impl Dataset {
    /// Builds and validates a dataset.
    pub fn new(columns: Vec<(String, Vec<f64>)>, roles: Roles) -> Result<Self> {
        let n = columns.first().map_or(0, |c| c.1.len());
        let mut seen = BTreeSet::new();
        for (name, col) in &columns {
            if col.len() != n {
                return Err(Error::Integrity(format!(
                    "column `{name}` has length {} but expected {n}",
                    col.len()
                )));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::Schema(format!("duplicate column `{name}`")));
            }
        }
        let (names, columns): (Vec<_>, Vec<_>) = columns.into_iter().unzip();
        let data = Dataset {
            n,
            names,
            columns,
            roles,
        };
        data.validate()?;
        Ok(data)
    }

    fn validate(&self) -> Result<()> {
        for name in self.roles.all_columns() {
            if self.index_of(name).is_none() {
                return Err(Error::Schema(format!(
                    "role refers to missing column `{name}`"
                )));
            }
        }
        for name in self.roles.binary_columns() {
            let col = self.column(name)?;
            if let Some(i) = col.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Integrity(format!(
                    "binary column `{name}` has value {} at row {i}",
                    col[i]
                )));
            }
        }
        let survival = self.survival();
        for name in self.roles.all_columns() {
            let col = self.column(name)?;
            let is_outcome = self.roles.outcome.as_deref() == Some(name);
            for (i, &v) in col.iter().enumerate() {
                if v.is_finite() {
                    continue;
                }
                let excused = is_outcome && v.is_nan() && survival.is_some_and(|s| s[i] == 0.0);
                if !excused {
                    return Err(Error::Integrity(format!(
                        "column `{name}` is not finite at row {i}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn roles(&self) -> &Roles {
        &self.roles
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.index_of(name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    }

    fn role_column(&self, role: &Option<String>, label: &str) -> Result<&[f64]> {
        let name = role
            .as_deref()
            .ok_or_else(|| Error::Schema(format!("no `{label}` role declared")))?;
        self.column(name)
    }

    pub fn outcome(&self) -> Result<&[f64]> {
        self.role_column(&self.roles.outcome, "outcome")
    }

    pub fn treatment(&self) -> Result<&[f64]> {
        self.role_column(&self.roles.treatment, "treatment")
    }

    pub fn survival(&self) -> Option<&[f64]> {
        self.roles
            .survival
            .as_deref()
            .and_then(|s| self.column(s).ok())
    }

    pub fn time_treatment(&self, t: usize) -> Result<&[f64]> {
        let name =
            self.roles.time_treatments.get(t).ok_or_else(|| {
                Error::Schema(format!("no time-varying treatment at time {}", t + 1))
            })?;
        self.column(name)
    }

    /// Finite outcomes (missing ones skipped).
    pub fn observed_outcomes(&self) -> Result<Vec<f64>> {
        Ok(self
            .outcome()?
            .iter()
            .copied()
            .filter(|y| y.is_finite())
            .collect())
    }

    /// Replaces a column in place (length must match).
    pub fn replace_column(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))?;
        if values.len() != self.n {
            return Err(Error::Integrity(format!(
                "replacement for `{name}` has wrong length"
            )));
        }
        let old = std::mem::replace(&mut self.columns[idx], values);
        if let Err(e) = self.validate() {
            self.columns[idx] = old;
            return Err(e);
        }
        Ok(())
    }

    pub fn with_roles(&self, roles: Roles) -> Result<Dataset> {
        let out = Dataset {
            roles,
            ..self.clone()
        };
        out.validate()?;
        Ok(out)
    }

    /// Rows in the given order (repeats allowed), as used by the bootstrap.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            n: rows.len(),
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&i| c[i]).collect())
                .collect(),
            roles: self.roles.clone(),
        }
    }

    /// Writes all columns; missing values become `NA`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
        w.write_record(&self.names)
            .map_err(|e| Error::Io(e.to_string()))?;
        let mut buf = Vec::with_capacity(self.names.len());
        for i in 0..self.n {
            buf.clear();
            for col in &self.columns {
                let v = col[i];
                buf.push(if v.is_nan() {
                    "NA".to_string()
                } else {
                    format!("{v:?}")
                });
            }
            w.write_record(&buf).map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a headed CSV file, keeping only the columns named by `roles`.
pub fn load_csv(path: impl AsRef<Path>, roles: Roles) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Io(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut wanted: Vec<&str> = Vec::new();
    for name in roles.all_columns() {
        if !wanted.contains(&name) {
            wanted.push(name);
        }
    }
    if wanted.is_empty() {
        return Err(Error::Schema("no column roles declared".into()));
    }
    let mut idx = Vec::with_capacity(wanted.len());
    for name in &wanted {
        let pos = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not in header")))?;
        idx.push(pos);
    }
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); wanted.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        for (c, &pos) in idx.iter().enumerate() {
            let cell = rec.get(pos).unwrap_or("").trim();
            let v = if cell.is_empty() || cell == "NA" {
                f64::NAN
            } else {
                cell.parse::<f64>().map_err(|e| Error::Parse {
                    row,
                    column: wanted[c].to_string(),
                    message: e.to_string(),
                })?
            };
            cols[c].push(v);
        }
    }
    let columns = wanted.iter().map(|s| s.to_string()).zip(cols).collect();
    Dataset::new(columns, roles)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n: usize,
    pub k: usize,
    pub fold_of: Vec<usize>,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.fold_of[i] != fold).collect()
    }
}

/// Seeded shuffle, then fold = position mod k.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > n {
        return Err(Error::Argument(format!(
            "fold count k={k} must satisfy 2 <= k <= n={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (pos, &unit) in order.iter().enumerate() {
        fold_of[unit] = pos % k;
    }
    Ok(FoldAssignment {
        n,
        k,
        fold_of,
        seed,
    })
}
