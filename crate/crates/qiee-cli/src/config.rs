//! JSON run configuration and its merge with command-line flags.

use std::collections::BTreeMap;
use std::path::PathBuf;

use qiee::dataset::Roles;
use qiee::estimands::Method;
use qiee::nuisance::LearnerSpec;
use qiee::simlab::ScenarioSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "QIEE_SEED";
pub const DEFAULT_ESTIMATE_SEED: u64 = 1;
pub const DEFAULT_BOOT: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Estimate,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceChoice {
    #[default]
    Eif,
    Bootstrap,
}

/// A catalog id or a full inline scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioRef {
    Id(String),
    Inline(Box<ScenarioSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub scenarios: Vec<ScenarioRef>,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub roles: Roles,
    #[serde(default)]
    pub estimand: Option<String>,
    /// Learner overrides keyed by role name.
    #[serde(default)]
    pub learners: BTreeMap<String, LearnerSpec>,
    #[serde(default)]
    pub q: Vec<f64>,
    #[serde(default)]
    pub method: Option<Method>,
    #[serde(default)]
    pub grid: Option<usize>,
    #[serde(default)]
    pub folds: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub reps: Option<usize>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub dgp: Option<String>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub rearrange: bool,
    #[serde(default = "default_true")]
    pub emit_plots: bool,
    #[serde(default)]
    pub level: Option<f64>,
    #[serde(default)]
    pub variance: VarianceChoice,
    #[serde(default)]
    pub n_boot: Option<usize>,
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn empty(command: Command) -> Self {
        RunConfig {
            command,
            scenarios: Vec::new(),
            data: None,
            roles: Roles::default(),
            estimand: None,
            learners: BTreeMap::new(),
            q: Vec::new(),
            method: None,
            grid: None,
            folds: None,
            seed: None,
            reps: None,
            n: None,
            dgp: None,
            out: None,
            rearrange: false,
            emit_plots: true,
            level: None,
            variance: VarianceChoice::Eif,
            n_boot: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Pretty JSON with every field spelled out.
    pub fn canonical(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies the seed environment override, if set.
    pub fn apply_env(&mut self) -> Result<(), CliError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v.trim().parse().map_err(|_| {
                CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))
            })?;
            self.seed = Some(seed);
        }
        Ok(())
    }

    pub fn check(&self) -> Result<(), CliError> {
        for &q in &self.q {
            if !(q > 0.0 && q < 1.0) {
                return Err(CliError::Usage(format!("q = {q} outside (0, 1)")));
            }
        }
        if let Some(l) = self.level {
            if !(l > 0.0 && l < 1.0) {
                return Err(CliError::Usage(format!("level = {l} outside (0, 1)")));
            }
        }
        if self.folds == Some(1) {
            return Err(CliError::Usage(
                "folds must be 0 (in-sample) or >= 2".into(),
            ));
        }
        if matches!(self.grid, Some(r) if r < 2) {
            return Err(CliError::Usage("grid must have at least 2 nodes".into()));
        }
        for (role, spec) in &self.learners {
            spec.validate()
                .map_err(|e| CliError::Usage(format!("learner for role `{role}`: {e}")))?;
        }
        Ok(())
    }
}
