use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use qiee::engine::Observations;
use qiee::estimands::{build_problem, Method, Target};
use qiee::nuisance::RoleValues;
use qiee::simlab::{
    catalog, dgp_example1, dgp_example2, dgp_example3, dgp_longitudinal2, generate,
    misspecify_covariates, misspecify_row, oracle_nuisance, oracle_truth, parse_scenario,
    run_monte_carlo, run_monte_carlo_multi, truth_is_cached, DgpFamily, DgpSpec, McSummary,
    ScenarioSpec,
};
use qiee::Error;

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

fn draw_l(rng: &mut ChaCha8Rng) -> [f64; 4] {
    [
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    ]
}

fn ps_index(l: &[f64; 4]) -> f64 {
    -l[0] + 0.5 * l[1] - 0.25 * l[2] - 0.1 * l[3]
}

fn surv_index(a: f64, l: &[f64; 4]) -> f64 {
    -1.0 + 2.0 * a + l[0] - 0.8 * l[1] + 0.6 * l[2] - l[3]
}

fn cov_index(l: &[f64; 4]) -> f64 {
    10.0 * l[0] + 5.0 * (l[1] + l[2] + l[3])
}

fn rows(d: &qiee::dataset::Dataset) -> Vec<[f64; 4]> {
    let c: Vec<&[f64]> = ["l1", "l2", "l3", "l4"]
        .iter()
        .map(|k| d.column(k).unwrap())
        .collect();
    (0..d.n())
        .map(|i| [c[0][i], c[1][i], c[2][i], c[3][i]])
        .collect()
}

fn sample_quantile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    v[((q * v.len() as f64).ceil() as usize).max(1) - 1]
}

#[test]
fn example1_design() {
    let n = 100_000;
    let d = dgp_example1(n, 1).unwrap();
    for k in ["l1", "l2", "l3", "l4"] {
        assert!(
            mean(d.column(k).unwrap()).abs() <= 4.0 / (n as f64).sqrt(),
            "{k}"
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let draws = 10_000_000;
    let p_true = (0..draws)
        .map(|_| expit(ps_index(&draw_l(&mut rng))))
        .sum::<f64>()
        / draws as f64;
    let p_hat = mean(d.treatment().unwrap());
    assert!(
        (p_hat - p_true).abs() <= 4.0 * (p_true * (1.0 - p_true) / n as f64).sqrt(),
        "{p_hat} vs {p_true}"
    );

    let (a, y) = (d.treatment().unwrap(), d.outcome().unwrap());
    let resid: Vec<f64> = rows(&d)
        .iter()
        .enumerate()
        .filter(|(i, _)| a[*i] == 0.0)
        .map(|(i, l)| y[i] - cov_index(l))
        .collect();
    let e2 = 2f64.exp();
    assert!((variance(&resid) / e2 - 1.0).abs() <= 0.15);

    let again = dgp_example1(500, 9).unwrap();
    assert_eq!(
        again.outcome().unwrap(),
        dgp_example1(500, 9).unwrap().outcome().unwrap()
    );
}

#[test]
fn example2_mediators() {
    let n = 100_000;
    let d = dgp_example2(n, 2).unwrap();
    let (a, y) = (d.treatment().unwrap(), d.outcome().unwrap());
    let (m1, m2) = (d.column("m1").unwrap(), d.column("m2").unwrap());
    let ls = rows(&d);
    let (mut r1, mut r2, mut shifted) = (Vec::new(), Vec::new(), Vec::new());
    for (i, l) in ls.iter().enumerate() {
        let s = l[1] + l[2] + l[3];
        r1.push(m1[i] - (0.5 * a[i] + 2.0 * l[0] + s));
        r2.push(m2[i] - (a[i] - l[0] - s));
        if a[i] == 1.0 {
            // outcome with covariates and mediators held at zero
            shifted.push(y[i] - m1[i] - m2[i] - cov_index(l));
        }
    }
    let cov =
        r1.iter().zip(&r2).map(|(x, z)| x * z).sum::<f64>() / n as f64 - mean(&r1) * mean(&r2);
    let corr = cov / (variance(&r1) * variance(&r2)).sqrt();
    assert!((corr - 0.2).abs() <= 0.05, "{corr}");
    let se = (variance(&shifted) / shifted.len() as f64).sqrt();
    assert!((mean(&shifted) - 3.5).abs() <= 4.0 * se);
    assert_eq!(
        dgp_example2(300, 5).unwrap().outcome().unwrap(),
        dgp_example2(300, 5).unwrap().outcome().unwrap()
    );
}

#[test]
fn example3_survival() {
    let n = 200_000;
    let d = dgp_example3(n, 3).unwrap();
    let (a, m, y) = (
        d.treatment().unwrap(),
        d.survival().unwrap(),
        d.outcome().unwrap(),
    );
    for i in 0..n {
        assert_eq!(m[i] == 0.0, y[i].is_nan());
    }
    let arm_rate = |arm: f64| {
        let sel: Vec<f64> = (0..n).filter(|&i| a[i] == arm).map(|i| m[i]).collect();
        (mean(&sel), sel.len())
    };
    let ((s0, n0), (s1, _)) = (arm_rate(0.0), arm_rate(1.0));
    assert!(s1 > s0);

    // P(M = 1 | A = 0) = E[(1 - pi(L)) s0(L)] / E[1 - pi(L)]
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..10_000_000 {
        let l = draw_l(&mut rng);
        let w = 1.0 - expit(ps_index(&l));
        num += w * expit(surv_index(0.0, &l));
        den += w;
    }
    let truth = num / den;
    assert!(
        (s0 - truth).abs() <= 4.0 * (truth * (1.0 - truth) / n0 as f64).sqrt(),
        "{s0} vs {truth}"
    );
}

#[test]
fn longitudinal_design() {
    let d = dgp_longitudinal2(2000, 4, true).unwrap();
    let p = build_problem(
        &Target::Longitudinal {
            regimen: vec![1, 1],
        },
        0.5,
    )
    .unwrap();
    let nu = oracle_nuisance(DgpFamily::Longitudinal2Randomized, &p, &d).unwrap();
    let (RoleValues::Fixed(p1), RoleValues::Fixed(p2)) = (&nu.roles[0], &nu.roles[1]) else {
        panic!("propensities are fixed values");
    };
    let (a1, a2) = (d.time_treatment(0).unwrap(), d.time_treatment(1).unwrap());
    for i in 0..d.n() {
        if a1[i] == 1.0 && a2[i] == 1.0 {
            assert_eq!(1.0 / (p1[i] * p2[i]), 4.0);
        }
    }

    // The first period alone has the single-time-point shape.
    let first = qiee::dataset::Roles {
        outcome: Some("y".into()),
        time_treatments: vec!["a1".into()],
        time_covariates: vec![vec!["l1".into()]],
        ..Default::default()
    };
    let t1 = d.with_roles(first).unwrap();
    let obs = Observations::new(&t1, &Target::Longitudinal { regimen: vec![1] }).unwrap();
    assert_eq!(obs.n(), d.n());

    // g-formula truth by forward simulation under the regimen (1, 1).
    let mut rng = ChaCha8Rng::seed_from_u64(79);
    let ys: Vec<f64> = (0..1_000_000)
        .map(|_| {
            let x1: f64 = rng.sample(StandardNormal);
            let x2 = 0.5 * x1 + 0.5 + rng.sample::<f64, _>(StandardNormal);
            3.0 + x1 + x2 + rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    for q in [0.25, 0.5, 0.75] {
        let sim = sample_quantile(ys.clone(), q);
        let truth = oracle_truth(
            DgpFamily::Longitudinal2,
            &Target::Longitudinal {
                regimen: vec![1, 1],
            },
            q,
        )
        .unwrap();
        assert!((sim - truth).abs() <= 0.015, "q={q}: {sim} vs {truth}");
    }
}

#[test]
fn covariate_transform() {
    let zero = misspecify_row([0.0; 4]);
    assert_eq!([zero[0], zero[1], zero[3]], [1.0, 0.0, 400.0]);
    assert!((zero[2] - 0.216).abs() < 1e-15);
    let at_pole = misspecify_row([-1.0, 2.0, 0.0, 0.0]);
    assert_eq!(at_pole[1], 2.0 / 0.05);
    let below = misspecify_row([-1.02, 2.0, 0.0, 0.0]);
    assert_eq!(below[1], 2.0 / -0.05);
    let away = misspecify_row([1.0, 3.0, 5.0, -1.0]);
    assert_eq!([away[0], away[1], away[3]], [0.5f64.exp(), 1.5, 484.0]);
    assert!((away[2] - 1.728).abs() < 1e-12);
    let batch = [[0.3, -0.2, 1.1, 0.4], [-1.0, 1.0, 1.0, 1.0]];
    assert_eq!(misspecify_covariates(&batch), misspecify_covariates(&batch));
    assert!(misspecify_covariates(&batch)
        .iter()
        .flatten()
        .all(|v| v.is_finite()));
}

#[test]
fn closed_form_truths() {
    let t0 = Target::Qte { arm: 0 };
    let t1 = Target::Qte { arm: 1 };
    assert_eq!(oracle_truth(DgpFamily::Example1, &t0, 0.5).unwrap(), 0.0);
    assert!((oracle_truth(DgpFamily::Example1, &t1, 0.5).unwrap() - 1.5).abs() < 1e-12);
    assert!(
        (oracle_truth(DgpFamily::Example2, &Target::Mediation, 0.5).unwrap() - 3.5).abs() < 1e-12
    );
    assert!(truth_is_cached(DgpFamily::Example1, &t0, 0.5));
    assert!(oracle_truth(DgpFamily::Example3, &t0, 0.5).is_err());
    assert!(oracle_truth(DgpFamily::Example1, &t0, 1.0).is_err());
}

#[test]
fn truncation_truth_matches_principal_stratum_simulation() {
    // Survivors under control also survive under treatment, so the stratum is
    // {M(0) = 1}; simulate it directly.
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let (mut y0, mut y1) = (Vec::new(), Vec::new());
    for _ in 0..2_000_000 {
        let l = draw_l(&mut rng);
        let u: f64 = rng.random();
        let (e0, e1): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        if u < expit(surv_index(0.0, &l)) {
            assert!(u < expit(surv_index(1.0, &l)));
            y0.push(1.0 + cov_index(&l) + 1f64.exp() * e0);
            y1.push(2.5 + cov_index(&l) + 1.5f64.exp() * e1);
        }
    }
    for q in [0.25, 0.5, 0.75] {
        for (arm, ys) in [(0u8, &y0), (1u8, &y1)] {
            let sim = sample_quantile(ys.clone(), q);
            let truth = oracle_truth(DgpFamily::Example3, &Target::Truncation { arm }, q).unwrap();
            assert!(
                (sim - truth).abs() <= 0.1,
                "arm {arm} q={q}: {sim} vs {truth}"
            );
        }
    }
}

fn small(id: &str, reps: usize) -> ScenarioSpec {
    ScenarioSpec {
        n: 300,
        n_reps: reps,
        ..parse_scenario(id).unwrap()
    }
}

#[test]
fn scenarios_are_reproducible_and_schedule_free() {
    let s = small("ex1/FT/q50/debiased", 6);
    let a = run_monte_carlo(&s).unwrap();
    let b = run_monte_carlo(&s).unwrap();
    assert_eq!(a, b);
    let serial = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| run_monte_carlo(&s).unwrap());
    let wide = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(|| run_monte_carlo(&s).unwrap());
    assert_eq!(serial, wide);
    for (k, r) in a.records.iter().enumerate() {
        assert_eq!(r.rep, k);
        assert_eq!(r.seed, s.base_seed + k as u64);
    }
}

#[test]
fn summary_recomputes_from_records() {
    let s = small("ex3/scenario-b/q50/sqce/debiased", 8);
    let r = run_monte_carlo(&s).unwrap();
    let again = McSummary::from_records(r.truth, &r.records);
    assert_eq!(again, r.summary);
    assert_eq!(r.summary.n_success + r.summary.n_failed, s.n_reps);
    let est: Vec<f64> = r.records.iter().filter_map(|x| x.estimate).collect();
    assert!((r.summary.bias - (mean(&est) - r.truth)).abs() < 1e-12);
    let hits = r.records.iter().filter(|x| x.covered == Some(true)).count();
    assert_eq!(r.summary.coverage, hits as f64 / est.len() as f64);
}

#[test]
fn shared_campaign_matches_single_runs() {
    let ids = [
        "ex1/TT/q50/debiased",
        "ex1/TT/q50/plugin",
        "ex1/TF/q25/debiased",
    ];
    let specs: Vec<ScenarioSpec> = ids.iter().map(|id| small(id, 3)).collect();
    let multi = run_monte_carlo_multi(&specs).unwrap();
    for (s, m) in specs.iter().zip(&multi) {
        assert_eq!(&run_monte_carlo(s).unwrap(), m);
    }
    let mut mixed = specs.clone();
    mixed[1].n = 400;
    assert!(matches!(
        run_monte_carlo_multi(&mixed),
        Err(Error::Argument(_))
    ));
}

#[test]
fn extreme_level_is_unstable() {
    let s = ScenarioSpec {
        q: 0.999,
        ..small("long/q50/debiased", 10)
    };
    match run_monte_carlo(&s) {
        Err(Error::Instability {
            failed,
            total,
            last,
        }) => {
            assert_eq!(total, 10);
            assert!(failed > 1, "{failed}");
            assert!(!last.is_empty());
        }
        other => panic!("expected instability, got {other:?}"),
    }
    let records = &run_monte_carlo_multi(&[s]).unwrap()[0].records;
    assert!(records
        .iter()
        .filter_map(|r| r.error.as_deref())
        .any(|e| e.contains("no sign change")));
}

#[test]
fn catalog_covers_every_label() {
    let ids = catalog();
    for id in &ids {
        parse_scenario(id).unwrap_or_else(|e| panic!("{id}: {e}"));
    }
    for label in ["TT", "FT", "TF", "FF"] {
        for q in [25, 50, 75] {
            assert!(ids.contains(&format!("ex1/{label}/q{q}/debiased")));
        }
    }
    for s in "abcdef".chars() {
        for q in [10, 25, 50, 75, 90] {
            assert!(ids.contains(&format!("ex2/scenario-{s}/q{q}/de-ml")));
            assert!(ids.contains(&format!("ex2/scenario-{s}/q{q}/hsu-pl/R=4")));
        }
    }
    for s in "abcde".chars() {
        for e in ["arm0", "arm1", "sqce"] {
            assert!(ids.contains(&format!("ex3/scenario-{s}/q50/{e}/debiased")));
        }
    }
}

#[test]
fn scenario_ids_parse() {
    let s = parse_scenario("ex2/scenario-c/q90/de-pl/R=10").unwrap();
    assert_eq!(s.family, DgpFamily::Example2);
    assert_eq!(s.q, 0.9);
    assert_eq!(s.grid, Some(10));
    assert_eq!(s.method, Method::Debiased);
    assert_eq!(
        s.misspecified_roles,
        vec!["mediator_propensity".to_string()]
    );
    let e = parse_scenario("ex3/scenario-c/q25/arm0/plugin").unwrap();
    assert_eq!(e.misspecified_roles, vec!["survival_control".to_string()]);
    for bad in [
        "ex9/TT/q50/debiased",
        "ex1/TX/q50/debiased",
        "ex1/TT/q5/debiased",
        "ex2/scenario-g/q50/de-ml",
        "ex2/scenario-a/q50/de-pl",
    ] {
        assert!(
            matches!(parse_scenario(bad), Err(Error::Argument(_))),
            "{bad}"
        );
    }
}

#[test]
fn small_designs_are_rejected() {
    let spec = DgpSpec {
        family: DgpFamily::Example1,
        n: 99,
        seed: 0,
    };
    assert!(matches!(generate(&spec), Err(Error::Argument(_))));
}
