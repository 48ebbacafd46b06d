use proptest::prelude::*;
use qiee::dataset::{make_folds, FoldAssignment};
use qiee::estimands::build_qte_problem;
use qiee::nuisance::{
    crossfit, fit_additive_cdf, fit_grid_cdf_family, fit_logistic_glm, interpolate, FeatureMatrix,
    LearnerSpec, RoleValues, EPS_PS,
};
use qiee::simlab::dgp_example1;
use qiee::{expit, norm_cdf, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn one_column(x: &[f64]) -> FeatureMatrix {
    FeatureMatrix::new(x.len(), 1, x.to_vec())
}

/// Damped Newton on the unpenalized 1-D logistic log-likelihood; written
/// independently of the library's IRLS.
fn newton_logistic(x: &[f64], y: &[f64], iters: usize) -> (f64, f64) {
    let (mut b0, mut b1) = (0.0f64, 0.0f64);
    for _ in 0..iters {
        let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&xi, &yi) in x.iter().zip(y) {
            let p = 1.0 / (1.0 + (-(b0 + b1 * xi)).exp());
            let w = p * (1.0 - p);
            g0 += yi - p;
            g1 += (yi - p) * xi;
            h00 += w;
            h01 += w * xi;
            h11 += w * xi * xi;
        }
        let det = h00 * h11 - h01 * h01;
        if det.abs() < 1e-300 {
            break;
        }
        b0 += (h11 * g0 - h01 * g1) / det;
        b1 += (h00 * g1 - h01 * g0) / det;
    }
    (b0, b1)
}

#[test]
fn intercept_only_balanced_labels_predict_half() {
    let x = FeatureMatrix::new(4, 0, vec![]);
    let m = fit_logistic_glm(&x, &[0.0, 1.0, 1.0, 0.0], &LearnerSpec::logistic()).unwrap();
    assert!((m.predict_row(&[]) - 0.5).abs() < 1e-12);
}

#[test]
fn complete_separation_needs_a_ridge() {
    let x = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
    let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    assert!(matches!(
        fit_logistic_glm(&one_column(&x), &y, &LearnerSpec::logistic()),
        Err(Error::Convergence(_))
    ));
    let spec = LearnerSpec {
        ridge: 0.01,
        ..LearnerSpec::logistic()
    };
    let m = fit_logistic_glm(&one_column(&x), &y, &spec).unwrap();
    assert!(m.coefficients().iter().all(|b| b.is_finite()));
}

#[test]
fn quasi_separated_four_points() {
    let x = [0.0, 0.0, 1.0, 1.0];
    let y = [0.0, 1.0, 1.0, 1.0];
    let (b0, b1) = newton_logistic(&x, &y, 60);
    let oracle = |xv: f64| expit(b0 + b1 * xv).clamp(EPS_PS, 1.0 - EPS_PS);
    // Frozen from the oracle: 0.5 at x = 0, clipped to 0.99 at x = 1.
    assert!((oracle(0.0) - 0.5).abs() < 1e-9);
    assert_eq!(oracle(1.0), 0.99);

    let m = fit_logistic_glm(&one_column(&x), &y, &LearnerSpec::logistic()).unwrap();
    assert!((m.predict_row(&[0.0]) - 0.5).abs() < 1e-6);
    assert!((m.predict_row(&[1.0]) - 0.99).abs() < 1e-12);
}

#[test]
fn logistic_matches_newton_oracle_on_overlapping_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..500).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&v| {
            if rng.random::<f64>() < expit(0.3 + 0.8 * v) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let (b0, b1) = newton_logistic(&x, &y, 50);
    let spec = LearnerSpec {
        clip: 0.0,
        ..LearnerSpec::logistic()
    };
    let m = fit_logistic_glm(&one_column(&x), &y, &spec).unwrap();
    for xv in [-2.0, -0.5, 0.0, 1.0, 2.5] {
        assert!((m.predict_row(&[xv]) - expit(b0 + b1 * xv)).abs() < 1e-8);
    }
}

#[test]
fn degenerate_labels_are_rejected() {
    let x = one_column(&[0.0, 1.0, 2.0]);
    assert!(matches!(
        fit_logistic_glm(&x, &[1.0, 1.0, 1.0], &LearnerSpec::logistic()),
        Err(Error::DegenerateLabels(_))
    ));
}

fn linear_data(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y = x
        .iter()
        .map(|&v| 2.0 * v + rng.sample::<f64, _>(StandardNormal))
        .collect();
    (x, y)
}

#[test]
fn symmetric_residuals_put_the_mean_at_the_median() {
    let (x, y) = linear_data(20_000, 11);
    let m = fit_additive_cdf(&one_column(&x), &y, &LearnerSpec::additive_cdf()).unwrap();
    for xv in [-1.5, -0.3, 0.0, 0.8, 1.7] {
        assert!((m.cdf(&[xv], 2.0 * xv) - 0.5).abs() < 0.02, "x={xv}");
    }
}

#[test]
fn additive_cdf_is_monotone_in_theta() {
    let (x, y) = linear_data(500, 12);
    let m = fit_additive_cdf(&one_column(&x), &y, &LearnerSpec::additive_cdf()).unwrap();
    let mut last = 0.0;
    for k in 0..=400 {
        let v = m.cdf(&[0.4], -10.0 + 0.05 * k as f64);
        assert!(v >= last - 1e-15);
        last = v;
    }
    assert!(m.cdf(&[0.4], -1e3) < 1e-12);
    assert!(m.cdf(&[0.4], 1e3) > 1.0 - 1e-12);
}

#[test]
fn additive_cdf_needs_twenty_rows() {
    let (x, y) = linear_data(19, 1);
    assert!(matches!(
        fit_additive_cdf(&one_column(&x), &y, &LearnerSpec::additive_cdf()),
        Err(Error::SampleSize { .. })
    ));
}

#[test]
fn control_arm_cdf_recovers_the_gaussian_law() {
    let d = dgp_example1(20_000, 3).unwrap();
    let a = d.treatment().unwrap();
    let rows: Vec<usize> = (0..d.n()).filter(|&i| a[i] == 0.0).collect();
    let cols: Vec<&[f64]> = ["l1", "l2", "l3", "l4"]
        .iter()
        .map(|c| d.column(c).unwrap())
        .collect();
    let x = FeatureMatrix::from_columns(&cols, &rows);
    let y: Vec<f64> = rows.iter().map(|&i| d.outcome().unwrap()[i]).collect();
    let m = fit_additive_cdf(&x, &y, &LearnerSpec::additive_cdf()).unwrap();
    let e = std::f64::consts::E;
    let sup = (0..=800)
        .map(|k| -10.0 + 0.025 * k as f64)
        .map(|t| (m.cdf(&[0.0; 4], t) - norm_cdf(t / e)).abs())
        .fold(0.0, f64::max);
    assert!(sup <= 0.02, "sup error {sup}");
}

#[test]
fn density_is_the_derivative_of_the_cdf() {
    let (x, y) = linear_data(2_000, 13);
    let m = fit_additive_cdf(&one_column(&x), &y, &LearnerSpec::additive_cdf()).unwrap();
    let mut s = y.clone();
    s.sort_by(f64::total_cmp);
    let iqr = s[3 * s.len() / 4] - s[s.len() / 4];
    let delta = 1e-4 * iqr;
    for xv in [-1.0, 0.0, 1.3] {
        for k in 0..=60 {
            let t = -6.0 + 0.2 * k as f64;
            let fd = (m.cdf(&[xv], t + delta) - m.cdf(&[xv], t - delta)) / (2.0 * delta);
            assert!((fd - m.density(&[xv], t)).abs() <= 1e-3, "x={xv} t={t}");
        }
    }
}

fn grid_fixture() -> (FeatureMatrix, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x: Vec<f64> = (0..600).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&v| v + rng.sample::<f64, _>(StandardNormal))
        .collect();
    (one_column(&x), x, y)
}

#[test]
fn grid_family_is_exact_at_nodes() {
    let (xm, _, y) = grid_fixture();
    let grid = [-1.5, -0.5, 0.0, 0.5, 1.5];
    let m = fit_grid_cdf_family(
        &LearnerSpec::grid_family(grid.len()),
        &xm,
        |_, t| y.iter().map(|&v| if v <= t { 1.0 } else { 0.0 }).collect(),
        &grid,
    )
    .unwrap();
    let nodes = m.node_values(&[0.3]);
    assert_eq!(m.eval(&[0.3], grid[2]), nodes[2]);
    assert!(nodes.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn interpolation_and_clamping() {
    let grid = [1.0, 2.0, 4.0];
    let vals = [0.2, 0.4, 0.9];
    assert!((interpolate(&grid, &vals, 1.5) - 0.3).abs() < 1e-15);
    assert_eq!(interpolate(&[1.0, 2.0], &[0.07, 0.5], 0.2), 0.07);
    assert_eq!(interpolate(&grid, &vals, 9.0), 0.9);
}

#[test]
fn below_grid_clamp_is_within_one_cell_of_a_direct_fit() {
    let (xm, _, y) = grid_fixture();
    let indicator =
        |t: f64| -> Vec<f64> { y.iter().map(|&v| if v <= t { 1.0 } else { 0.0 }).collect() };
    let grid: Vec<f64> = (0..10).map(|r| -1.8 + 0.4 * r as f64).collect();
    let spec = LearnerSpec::grid_family(grid.len());
    let coarse = fit_grid_cdf_family(&spec, &xm, |_, t| indicator(t), &grid).unwrap();
    let query = grid[0] - 0.2;
    let direct = fit_logistic_glm(&xm, &indicator(query), &LearnerSpec::logistic()).unwrap();
    let xs = [-1.0, 0.0, 1.0];
    let resolution = xs
        .iter()
        .map(|&xv| {
            let nodes = coarse.node_values(&[xv]);
            (nodes[1] - nodes[0]).abs()
        })
        .fold(0.0, f64::max);
    for xv in xs {
        let gap = (coarse.eval(&[xv], query) - direct.predict_row(&[xv])).abs();
        assert!(gap <= resolution, "x={xv}: gap {gap} > cell {resolution}");
    }
}

#[test]
fn non_increasing_grid_is_rejected() {
    let (xm, _, y) = grid_fixture();
    let r = fit_grid_cdf_family(
        &LearnerSpec::grid_family(3),
        &xm,
        |_, t| y.iter().map(|&v| if v <= t { 1.0 } else { 0.0 }).collect(),
        &[0.0, 1.0, 1.0],
    );
    assert!(matches!(r, Err(Error::Argument(_))));
}

#[test]
fn five_fold_structure() {
    let d = dgp_example1(1000, 8).unwrap();
    let p = build_qte_problem(0, 0.5).unwrap();
    let folds = make_folds(1000, 5, 1).unwrap();
    let fit = crossfit(&d, &folds, &p.roles, &p.default_specs()).unwrap();
    assert_eq!(fit.n(), 1000);
    assert_eq!(fit.training_rows[0], vec![800; 5]);
    let a = d.treatment().unwrap();
    for (fold, &rows) in fit.training_rows[1].iter().enumerate() {
        let controls = folds
            .complement(fold)
            .iter()
            .filter(|&&i| a[i] == 0.0)
            .count();
        assert_eq!(rows, controls);
    }
}

#[test]
fn fold_members_ignore_their_own_rows() {
    let d = dgp_example1(600, 9).unwrap();
    let p = build_qte_problem(0, 0.5).unwrap();
    let folds = make_folds(600, 3, 4).unwrap();
    let specs = p.default_specs();
    let base = crossfit(&d, &folds, &p.roles, &specs).unwrap();

    let mut perturbed = d.clone();
    let mut a = d.treatment().unwrap().to_vec();
    let mut y = d.outcome().unwrap().to_vec();
    for i in folds.members(2) {
        a[i] = 1.0 - a[i];
        y[i] += 50.0;
    }
    perturbed.replace_column("a", a).unwrap();
    perturbed.replace_column("y", y).unwrap();
    let moved = crossfit(&perturbed, &folds, &p.roles, &specs).unwrap();

    for i in 0..600 {
        let same_ps = base.value(0, i, 0.0) == moved.value(0, i, 0.0);
        let same_cdf = base.value(1, i, 1.0) == moved.value(1, i, 1.0);
        if folds.fold_of[i] == 2 {
            assert!(same_ps && same_cdf, "unit {i} saw its own fold");
        } else {
            assert!(!same_ps && !same_cdf, "unit {i} did not see fold 2");
        }
    }
}

#[test]
fn single_fold_is_rejected() {
    let d = dgp_example1(200, 1).unwrap();
    let p = build_qte_problem(0, 0.5).unwrap();
    let folds = FoldAssignment {
        n: 200,
        k: 1,
        fold_of: vec![0; 200],
        seed: 0,
    };
    assert!(matches!(
        crossfit(&d, &folds, &p.roles, &p.default_specs()),
        Err(Error::Argument(_))
    ));
}

#[test]
fn fit_failures_name_role_and_fold() {
    let mut d = dgp_example1(200, 1).unwrap();
    let a: Vec<f64> = (0..200).map(|i| if i < 30 { 0.0 } else { 1.0 }).collect();
    d.replace_column("a", a).unwrap();
    let p = build_qte_problem(0, 0.5).unwrap();
    let folds = make_folds(200, 2, 0).unwrap();
    match crossfit(&d, &folds, &p.roles, &p.default_specs()) {
        Err(Error::Fit { role, source, .. }) => {
            assert_eq!(role, "outcome_cdf");
            assert!(matches!(*source, Error::SampleSize { .. }));
        }
        other => panic!("expected a fit error, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn probabilities_stay_inside_the_clip(seed in any::<u64>(), slope in -6.0f64..6.0, probe in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..80).map(|_| rng.sample(StandardNormal)).collect();
        let mut y: Vec<f64> = x.iter().map(|&v| if rng.random::<f64>() < expit(slope * v) { 1.0 } else { 0.0 }).collect();
        y[0] = 0.0;
        y[1] = 1.0;
        let spec = LearnerSpec { ridge: 0.01, ..LearnerSpec::logistic() };
        let m = fit_logistic_glm(&one_column(&x), &y, &spec).unwrap();
        let p = m.predict_row(&[probe]);
        prop_assert!((EPS_PS..=1.0 - EPS_PS).contains(&p));
    }

    #[test]
    fn fitted_cdfs_are_valid(seed in any::<u64>(), scale in 0.1f64..5.0, xs in prop::collection::vec(-3.0f64..3.0, 1..5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..60).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = x.iter().map(|&v| v + scale * (0.5 + v.abs()) * rng.sample::<f64, _>(StandardNormal)).collect();
        let m = fit_additive_cdf(&one_column(&x), &y, &LearnerSpec::additive_cdf()).unwrap();
        for &xv in &xs {
            let mut last = 0.0;
            for k in 0..=200 {
                let v = m.cdf(&[xv], -30.0 + 0.3 * k as f64);
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!(v >= last);
                last = v;
            }
        }
    }
}

#[test]
fn crossfit_roles_have_expected_value_kinds() {
    let d = dgp_example1(300, 2).unwrap();
    let p = build_qte_problem(1, 0.5).unwrap();
    let fit = crossfit(
        &d,
        &make_folds(300, 2, 0).unwrap(),
        &p.roles,
        &p.default_specs(),
    )
    .unwrap();
    assert!(matches!(fit.roles[0], RoleValues::Fixed(_)));
    assert!(matches!(fit.roles[1], RoleValues::Curve(_)));
}
