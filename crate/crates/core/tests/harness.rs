use std::fs;
use std::path::Path;

use recsim_core::harness::{
    aggregate, aggregate_rows, read_raw, run, CellRow, ModelChoice, PenaltyChoice, RosterEntry, RunManifest,
    RunOptions, LEDGER_FILE, RAW_FILE,
};
use recsim_core::{ModelKind, ScenarioSpec};

fn entry(model: &str, penalty: &str) -> RosterEntry {
    RosterEntry {
        model: model.parse().unwrap(),
        penalty: penalty.parse().unwrap(),
    }
}

fn small_manifest() -> RunManifest {
    let mut m = RunManifest {
        name: "small".into(),
        seed: 99,
        scenarios: RunManifest::study_grid(&[6], 3, Some(8)),
        roster: vec![
            entry("AG", "none"),
            entry("WLW", "ridge"),
            entry("Frailty", "bar@0.1"),
            entry("RankDeepSurv", "none"),
        ],
        ..RunManifest::default()
    };
    for s in &mut m.scenarios {
        s.n = 40;
    }
    m.network.epochs = 10;
    m
}

fn run_into(manifest: &RunManifest, dir: &Path) -> String {
    run(manifest, &RunOptions { out_dir: dir.to_path_buf(), resume: false }).unwrap();
    fs::read_to_string(dir.join(RAW_FILE)).unwrap()
}

#[test]
fn smoke_run_has_one_row_per_replicate() {
    let dir = tempfile::tempdir().unwrap();
    let m = RunManifest {
        scenarios: vec![ScenarioSpec { p: 25, replicates: 2, max_events: Some(20), ..ScenarioSpec::default() }],
        roster: vec![entry("AG", "none")],
        ..RunManifest::default()
    };
    let summary = run(&m, &RunOptions { out_dir: dir.path().into(), resume: false }).unwrap();
    assert_eq!(summary.total_cells, 2);
    let store = read_raw(&dir.path().join(RAW_FILE)).unwrap();
    assert_eq!(store.manifest_hash, m.hash());
    assert_eq!(store.rows.len(), 2);
    assert_eq!(store.rows[0].model, "AG");
    assert_eq!((store.rows[0].replicate, store.rows[1].replicate), (0, 1));
    assert!(store.rows.iter().all(|r| r.converged && r.kim_c.is_some()));
}

#[test]
fn raw_output_is_independent_of_thread_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let m = small_manifest();
    let one = run_into(&m, a.path());
    let four = run_into(&RunManifest { parallelism: 4, ..m.clone() }, b.path());
    assert_eq!(one, four);
    let store = read_raw(&a.path().join(RAW_FILE)).unwrap();
    assert_eq!(store.rows.len(), m.total_cells());
}

#[test]
fn resume_completes_an_interrupted_ledger() {
    let full = tempfile::tempdir().unwrap();
    let m = small_manifest();
    let expected = run_into(&m, full.path());

    let part = tempfile::tempdir().unwrap();
    run_into(&m, part.path());
    // keep header, hash and five rows, then a torn sixth line
    let ledger = fs::read_to_string(part.path().join(LEDGER_FILE)).unwrap();
    let lines: Vec<&str> = ledger.lines().collect();
    let mut cut = lines[..7].join("\n");
    cut.push('\n');
    cut.push_str(&lines[7][..10]);
    fs::write(part.path().join(LEDGER_FILE), cut).unwrap();
    fs::remove_file(part.path().join(RAW_FILE)).unwrap();

    let opts = RunOptions { out_dir: part.path().into(), resume: true };
    let summary = run(&m, &opts).unwrap();
    assert_eq!(summary.resumed, 5);
    assert_eq!(summary.executed, m.total_cells() - 5);
    assert_eq!(fs::read_to_string(part.path().join(RAW_FILE)).unwrap(), expected);

    // a different manifest may not resume this directory
    let other = RunManifest { seed: 7, ..m.clone() };
    assert!(run(&other, &opts).is_err());
    // nor may a fresh run overwrite it
    assert!(run(&m, &RunOptions { out_dir: part.path().into(), resume: false }).is_err());
}

#[test]
fn failures_are_rows_not_crashes() {
    let dir = tempfile::tempdir().unwrap();
    let m = RunManifest {
        scenarios: vec![ScenarioSpec { n: 30, p: 40, replicates: 2, max_events: Some(10), ..ScenarioSpec::default() }],
        roster: vec![entry("PWP", "none")],
        ..RunManifest::default()
    };
    run(&m, &RunOptions { out_dir: dir.path().into(), resume: false }).unwrap();
    let store = read_raw(&dir.path().join(RAW_FILE)).unwrap();
    assert_eq!(store.rows.len(), 2);
    for row in &store.rows {
        assert!(!row.converged);
        assert_ne!(row.reason, "CONVERGED");
        assert_eq!(row.kim_c, None);
    }
}

fn row(scenario: &str, rep: usize, kim: Option<f64>, err: Option<f64>) -> CellRow {
    CellRow {
        scenario_id: scenario.into(),
        replicate: rep,
        model: "AG".into(),
        penalty: "none".into(),
        kim_c: kim,
        kim_pairs: kim.map(|_| 10),
        err,
        fp: None,
        fn_: None,
        harrell: vec![(kim, 4)],
        converged: kim.is_some(),
        reason: if kim.is_some() { "CONVERGED" } else { "SINGULAR" }.into(),
        frailty_variance: None,
    }
}

#[test]
fn aggregation_arithmetic() {
    let m = RunManifest {
        scenarios: vec![
            ScenarioSpec { p: 25, sparse_rate: 0.0, ..ScenarioSpec::default() },
            ScenarioSpec { p: 50, sparse_rate: 0.0, ..ScenarioSpec::default() },
            ScenarioSpec { p: 100, sparse_rate: 0.0, ..ScenarioSpec::default() },
        ],
        roster: vec![RosterEntry { model: ModelChoice::Cox(ModelKind::AndersenGill), penalty: PenaltyChoice::None }],
        harrell_k: 1,
        ..RunManifest::default()
    };
    let rows = vec![
        row("p25-sr0", 0, Some(0.5), Some(0.2)),
        row("p25-sr0", 1, Some(0.7), Some(0.4)),
        row("p25-sr0", 2, Some(0.9), None),
        row("p50-sr0", 0, Some(0.6), Some(0.1)),
        row("p100-sr0", 0, None, None),
        row("p100-sr0", 1, None, None),
    ];
    let summary = aggregate_rows(&m, 1, &rows);
    let get = |s: &str, metric: &str| summary.iter().find(|r| r.scenario_id == s && r.metric == metric).unwrap();

    let kim = get("p25-sr0", "kim_c");
    assert_eq!(kim.count, 3);
    assert!((kim.mean.unwrap() - 0.7).abs() < 1e-12);
    assert!((kim.sd.unwrap() - 0.2).abs() < 1e-12);
    assert_eq!((kim.min, kim.max), (Some(0.5), Some(0.9)));
    let err = get("p25-sr0", "err");
    assert_eq!(err.count, 2);
    assert!((err.mean.unwrap() - 0.3).abs() < 1e-12);

    let single = get("p50-sr0", "harrell_k1");
    assert_eq!((single.count, single.mean, single.sd), (1, Some(0.6), None));

    let failed = get("p100-sr0", "kim_c");
    assert_eq!((failed.count, failed.mean, failed.sd, failed.min), (0, None, None, None));
    assert_eq!(get("p100-sr0", "converged").mean, Some(0.0));
}

#[test]
fn aggregate_writes_headed_tables_and_is_idempotent() {
    let run_dir = tempfile::tempdir().unwrap();
    let m = small_manifest();
    run_into(&m, run_dir.path());
    let out = tempfile::tempdir().unwrap();
    aggregate(run_dir.path(), out.path()).unwrap();
    let first: Vec<(String, String)> = ["summary.csv", "curves_cindex.csv", "curves_error.csv", "distributions.csv"]
        .iter()
        .map(|f| (f.to_string(), fs::read_to_string(out.path().join(f)).unwrap()))
        .collect();
    let header = format!("# manifest_sha256={}", m.hash());
    for (name, text) in &first {
        assert!(text.starts_with(&header), "{name}");
    }
    aggregate(run_dir.path(), out.path()).unwrap();
    for (name, text) in &first {
        assert_eq!(&fs::read_to_string(out.path().join(name)).unwrap(), text, "{name}");
    }
}
