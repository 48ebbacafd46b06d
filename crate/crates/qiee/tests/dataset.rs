use std::io::Write;

use proptest::prelude::*;
use qiee::dataset::{load_csv, make_folds, Dataset, Roles};
use qiee::Error;

fn write_file(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.path().join(name);
    let mut f = std::fs::File::create(&path).unwrap();
    f.write_all(body.as_bytes()).unwrap();
    path
}

fn basic_roles() -> Roles {
    Roles {
        outcome: Some("y".into()),
        treatment: Some("a".into()),
        covariates: vec!["l1".into()],
        ..Roles::default()
    }
}

fn survival_roles() -> Roles {
    Roles {
        survival: Some("m".into()),
        ..basic_roles()
    }
}

#[test]
fn three_row_file_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(&dir, "d.csv", "y,a,l1\n1.5,0,0.1\n-2,1,0.2\n3.25,1,-0.3\n");
    let d = load_csv(&path, basic_roles()).unwrap();
    assert_eq!(d.n(), 3);
    assert_eq!(d.outcome().unwrap(), &[1.5, -2.0, 3.25]);
    assert_eq!(d.treatment().unwrap(), &[0.0, 1.0, 1.0]);
    assert_eq!(d.column("l1").unwrap(), &[0.1, 0.2, -0.3]);
}

#[test]
fn absent_column_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(&dir, "d.csv", "y,a,l1\n1,0,0\n");
    let roles = Roles {
        covariates: vec!["l1".into(), "z".into()],
        ..basic_roles()
    };
    match load_csv(&path, roles) {
        Err(Error::Schema(msg)) => assert!(msg.contains('z'), "{msg}"),
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn non_numeric_cell_reports_its_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(&dir, "d.csv", "y,a,l1\n1,0,0\n2,1,abc\n");
    match load_csv(&path, basic_roles()) {
        Err(Error::Parse { row, column, .. }) => {
            assert_eq!(row, 1);
            assert_eq!(column, "l1");
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn survival_sentinel_rule() {
    let dir = tempfile::tempdir().unwrap();
    let ok = write_file(&dir, "ok.csv", "y,a,m,l1\n1.0,0,1,0\n,1,0,0\nNA,0,0,1\n");
    let d = load_csv(&ok, survival_roles()).unwrap();
    assert_eq!(d.n(), 3);
    assert!(d.outcome().unwrap()[1].is_nan());
    assert!(d.outcome().unwrap()[2].is_nan());
    assert_eq!(d.survival().unwrap(), &[1.0, 0.0, 0.0]);

    let bad = write_file(&dir, "bad.csv", "y,a,m,l1\n1.0,0,1,0\n,1,1,0\n");
    assert!(matches!(
        load_csv(&bad, survival_roles()),
        Err(Error::Integrity(_))
    ));

    let no_survival = write_file(&dir, "ns.csv", "y,a,l1\n1.0,0,0\nNA,1,0\n");
    assert!(matches!(
        load_csv(&no_survival, basic_roles()),
        Err(Error::Integrity(_))
    ));
}

#[test]
fn binary_roles_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(&dir, "d.csv", "y,a,l1\n1,0.5,0\n2,1,0\n");
    assert!(matches!(
        load_csv(&path, basic_roles()),
        Err(Error::Integrity(_))
    ));
    let cols = vec![
        ("y".to_string(), vec![1.0, 2.0]),
        ("a".to_string(), vec![0.0, 2.0]),
        ("l1".to_string(), vec![0.0, 0.0]),
    ];
    assert!(Dataset::new(cols, basic_roles()).is_err());
}

#[test]
fn columns_must_share_length() {
    let cols = vec![
        ("y".to_string(), vec![1.0, 2.0]),
        ("a".to_string(), vec![0.0]),
        ("l1".to_string(), vec![0.0, 0.0]),
    ];
    assert!(Dataset::new(cols, basic_roles()).is_err());
}

#[test]
fn folds_of_ten_into_five() {
    let f = make_folds(10, 5, 42).unwrap();
    for k in 0..5 {
        assert_eq!(f.members(k).len(), 2);
    }
    assert_eq!(make_folds(10, 5, 42).unwrap().fold_of, f.fold_of);
    assert!(matches!(make_folds(10, 11, 42), Err(Error::Argument(_))));
    assert!(matches!(make_folds(10, 1, 42), Err(Error::Argument(_))));
}

#[test]
fn complement_excludes_members() {
    let f = make_folds(23, 4, 7).unwrap();
    for k in 0..4 {
        let m = f.members(k);
        let c = f.complement(k);
        assert_eq!(m.len() + c.len(), 23);
        assert!(m.iter().all(|i| !c.contains(i)));
    }
}

fn arb_table() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(
                prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL,
                n,
            ),
            prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1.0 } else { 0.0 }), n),
            prop::collection::vec(-1e6f64..1e6, n),
        )
    })
}

proptest! {
    #[test]
    fn csv_round_trip_is_bit_exact((y, a, l) in arb_table()) {
        let d = Dataset::new(
            vec![("y".into(), y.clone()), ("a".into(), a.clone()), ("l1".into(), l.clone())],
            basic_roles(),
        ).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.csv");
        d.write_csv(&path).unwrap();
        let back = load_csv(&path, basic_roles()).unwrap();
        for (name, orig) in [("y", &y), ("a", &a), ("l1", &l)] {
            let got = back.column(name).unwrap();
            prop_assert_eq!(got.len(), orig.len());
            for (g, o) in got.iter().zip(orig.iter()) {
                prop_assert_eq!(g.to_bits(), o.to_bits());
            }
        }
    }

    #[test]
    fn folds_partition_units(n in 2usize..300, k_raw in 2usize..12, seed in any::<u64>()) {
        let k = k_raw.min(n);
        let f = make_folds(n, k, seed).unwrap();
        let mut seen = vec![0u32; n];
        let mut sizes = Vec::new();
        for fold in 0..k {
            let m = f.members(fold);
            sizes.push(m.len());
            for i in m {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(make_folds(n, k, seed).unwrap().fold_of, f.fold_of);
    }
}
