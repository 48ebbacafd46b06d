//! Simulation designs, true values, and the Monte Carlo scenario runner.

mod dgp;
mod mc;
mod oracle;

pub use dgp::{
    dgp_example1, dgp_example2, dgp_example3, dgp_longitudinal2, dgp_null, generate,
    misspecify_covariates, misspecify_row, DgpFamily, DgpSpec, MIN_N,
};
pub use mc::{
    catalog, cell_width, parse_scenario, run_monte_carlo, run_monte_carlo_multi, with_grid,
    write_plot_csv, write_records_csv, MCResult, McSummary, RepRecord, ScenarioSpec, DEFAULT_FOLDS,
    DEFAULT_N, DEFAULT_REPS, DEFAULT_SEED, GRID_NODE_RIDGE, MAX_REP_FAILURES,
};
pub use oracle::{
    oracle_nuisance, oracle_truth, oracle_truth_spec, truth_is_cached, ORACLE_DRAWS, ORACLE_SEED,
};
