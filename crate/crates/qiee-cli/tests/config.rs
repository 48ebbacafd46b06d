use proptest::prelude::*;
use qiee::estimands::Method;
use qiee::nuisance::LearnerSpec;
use qiee_cli::config::{Command, RunConfig, ScenarioRef, VarianceChoice};

#[test]
fn minimal_config_fills_defaults() {
    let cfg = RunConfig::from_json(r#"{"command":"oracle","dgp":"ex1"}"#).unwrap();
    assert_eq!(cfg.command, Command::Oracle);
    assert!(cfg.emit_plots);
    assert!(!cfg.rearrange);
    assert_eq!(cfg.variance, VarianceChoice::Eif);
    assert!(cfg.q.is_empty());
}

#[test]
fn unknown_keys_are_rejected_at_every_level() {
    assert!(RunConfig::from_json(r#"{"command":"estimate","extra":0}"#).is_err());
    assert!(
        RunConfig::from_json(r#"{"command":"estimate","roles":{"outcome":"y","wrong":1}}"#)
            .is_err()
    );
    assert!(RunConfig::from_json(
        r#"{"command":"estimate","learners":{"propensity":{"kind":"logistic-glm","lambda":1}}}"#
    )
    .is_err());
    assert!(RunConfig::from_json(r#"{"command":"launch"}"#).is_err());
}

#[test]
fn scenarios_accept_ids_and_inline_specs() {
    let cfg = RunConfig::from_json(
        r#"{"command":"simulate","scenarios":["ex1/TT/q50/plugin",
            {"id":"mine","family":"example3","n":500,"estimand":"sqce","q":0.4,"method":"debiased",
             "grid":null,"misspecified_roles":["propensity"],"k_folds":2,"n_reps":10,"base_seed":3}]}"#,
    )
    .unwrap();
    assert!(matches!(&cfg.scenarios[0], ScenarioRef::Id(s) if s == "ex1/TT/q50/plugin"));
    match &cfg.scenarios[1] {
        ScenarioRef::Inline(s) => {
            assert_eq!(s.n, 500);
            assert_eq!(s.misspecified_roles, vec!["propensity".to_string()]);
        }
        other => panic!("expected inline scenario, got {other:?}"),
    }
}

fn arb_config() -> impl Strategy<Value = RunConfig> {
    (
        prop::sample::select(vec![Command::Simulate, Command::Estimate, Command::Oracle]),
        prop::collection::vec(0.01f64..0.99, 0..4),
        prop::option::of(prop::sample::select(vec![
            Method::Plugin,
            Method::Debiased,
            Method::Oracle,
            Method::InverseCdf,
        ])),
        prop::option::of(2usize..200),
        prop::option::of(0usize..10),
        prop::option::of(any::<u64>()),
        any::<bool>(),
        any::<bool>(),
        prop::option::of(0.5f64..0.999),
        prop::option::of(0.0f64..1.0),
    )
        .prop_map(
            |(command, q, method, grid, folds, seed, rearrange, plots, level, ridge)| {
                let mut cfg = RunConfig::empty(command);
                cfg.q = q;
                cfg.method = method;
                cfg.grid = grid;
                cfg.folds = folds;
                cfg.seed = seed;
                cfg.rearrange = rearrange;
                cfg.emit_plots = plots;
                cfg.level = level;
                cfg.estimand = Some("qte:a=1".into());
                cfg.scenarios = vec![ScenarioRef::Id("ex1/TT/q50/debiased".into())];
                if let Some(r) = ridge {
                    cfg.learners.insert(
                        "propensity".into(),
                        LearnerSpec {
                            ridge: r,
                            ..LearnerSpec::logistic()
                        },
                    );
                }
                cfg
            },
        )
}

proptest! {
    #[test]
    fn canonical_form_round_trips(cfg in arb_config()) {
        let text = cfg.canonical();
        let back = RunConfig::from_json(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.canonical(), text);
    }
}
