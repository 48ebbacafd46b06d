use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qiee::estimands::Method;
use qiee_cli::commands::run;
use qiee_cli::config::{Command, RunConfig, ScenarioRef};
use qiee_cli::{exit, CliError};

#[derive(Parser)]
#[command(
    name = "qiee",
    version,
    about = "Quantiles of potential outcomes by (debiased) inverse estimating equations"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Run Monte Carlo scenarios, e.g. `ex2/scenario-c/q90/de-pl/R=10`.
    Simulate {
        scenarios: Vec<String>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reps: Option<usize>,
        /// Sample size per replication.
        #[arg(long)]
        n: Option<usize>,
        /// Skip the long-format plotting CSV.
        #[arg(long)]
        no_plots: bool,
    },
    /// Estimate on a CSV file.
    Estimate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// `qte:a=1`, `mediation:1m0`, `truncation:a=0`, `longitudinal:a=1,1`, `qte`, `nqie`, `nqde` or `sqce`.
        #[arg(long)]
        estimand: Option<String>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rearrange: bool,
    },
    /// True values for a simulation design.
    Oracle {
        /// ex1, ex2, ex3, long, long-randomized or null.
        #[arg(long)]
        dgp: Option<String>,
        #[arg(long)]
        estimand: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// List the scenario catalog.
    Catalog,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Quantile levels, comma separated.
    #[arg(long, value_delimiter = ',')]
    q: Vec<f64>,
    /// plugin, debiased, oracle or inverse-cdf.
    #[arg(long)]
    method: Option<Method>,
    /// Grid size R.
    #[arg(long)]
    grid: Option<usize>,
    /// Cross-fitting folds; 0 fits in-sample.
    #[arg(long)]
    folds: Option<usize>,
}

fn base_config(command: Command, common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::empty(command),
    };
    if cfg.command != command {
        return Err(CliError::Usage(format!(
            "config is for `{:?}`, not `{command:?}`",
            cfg.command
        )));
    }
    cfg.apply_env()?;
    if let Some(v) = &common.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = common.seed {
        cfg.seed = Some(v);
    }
    if !common.q.is_empty() {
        cfg.q = common.q.clone();
    }
    if let Some(v) = common.method {
        cfg.method = Some(v);
    }
    if let Some(v) = common.grid {
        cfg.grid = Some(v);
    }
    if let Some(v) = common.folds {
        cfg.folds = Some(v);
    }
    Ok(cfg)
}

fn build(cli: Cli) -> Result<Option<(RunConfig, Option<usize>)>, CliError> {
    Ok(Some(match cli.command {
        Sub::Simulate {
            scenarios,
            common,
            reps,
            n,
            no_plots,
        } => {
            let mut cfg = base_config(Command::Simulate, &common)?;
            cfg.scenarios
                .extend(scenarios.into_iter().map(ScenarioRef::Id));
            if reps.is_some() {
                cfg.reps = reps;
            }
            if n.is_some() {
                cfg.n = n;
            }
            if no_plots {
                cfg.emit_plots = false;
            }
            (cfg, common.jobs)
        }
        Sub::Estimate {
            data,
            estimand,
            common,
            rearrange,
        } => {
            let mut cfg = base_config(Command::Estimate, &common)?;
            if data.is_some() {
                cfg.data = data;
            }
            if estimand.is_some() {
                cfg.estimand = estimand;
            }
            cfg.rearrange |= rearrange;
            (cfg, common.jobs)
        }
        Sub::Oracle {
            dgp,
            estimand,
            common,
        } => {
            let mut cfg = base_config(Command::Oracle, &common)?;
            if dgp.is_some() {
                cfg.dgp = dgp;
            }
            if estimand.is_some() {
                cfg.estimand = estimand;
            }
            (cfg, common.jobs)
        }
        Sub::Catalog => {
            for id in qiee::simlab::catalog() {
                println!("{id}");
            }
            return Ok(None);
        }
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = build(cli).and_then(|built| {
        let Some((cfg, jobs)) = built else {
            return Ok(String::new());
        };
        if let Some(j) = jobs {
            if j == 0 {
                return Err(CliError::Usage("--jobs must be positive".into()));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(j)
                .build_global()
                .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        run(&cfg)
    });
    match outcome {
        Ok(text) => {
            print!("{text}");
            ExitCode::from(exit::OK as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
