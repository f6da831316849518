use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn recsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recsim")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
name = "tiny"
seed = 5

[network]
epochs = 5

[[roster]]
model = "AG"
penalty = "none"

[[roster]]
model = "PWP"
penalty = "lasso"

[[scenarios]]
n = 30
p = 4
replicates = 2
max_events = 10
"#;

#[test]
fn print_defaults_round_trips() {
    for what in ["scenario", "desk", "full"] {
        let out = recsim(&["print-defaults", what]);
        assert!(out.status.success());
        assert!(!out.stdout.is_empty());
    }
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, recsim(&["print-defaults"]).stdout).unwrap();
    let csv = dir.path().join("data.csv");
    let out = recsim(&["simulate", "--spec", path(&spec), "--out", path(&csv), "--model", "WLW"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(&csv).unwrap().lines().count() > 100);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("data.json")).unwrap()).unwrap();
    assert_eq!(meta["model"], "WLW");
    assert_eq!(meta["p"], 25);
    assert_eq!(meta["active_mask"].as_array().unwrap().len(), 25);
    assert_eq!(meta["truth"]["beta"].as_array().unwrap().len(), 25);
}

#[test]
fn run_then_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("tiny.toml");
    fs::write(&manifest, TINY).unwrap();
    let out_dir = dir.path().join("run");
    let out = recsim(&["run", "--manifest", path(&manifest), "--out", path(&out_dir), "--parallel", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let raw = fs::read_to_string(out_dir.join("raw.csv")).unwrap();
    assert!(raw.starts_with("# manifest_sha256="));
    assert_eq!(raw.lines().count(), 2 + 4);

    // rerunning into the same directory needs --resume, which finds nothing to do
    assert!(!recsim(&["run", "--manifest", path(&manifest), "--out", path(&out_dir)]).status.success());
    let out = recsim(&["run", "--manifest", path(&manifest), "--out", path(&out_dir), "--resume"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("(0 run, 4 resumed)"));
    assert_eq!(fs::read_to_string(out_dir.join("raw.csv")).unwrap(), raw);

    let summary_dir = dir.path().join("summary");
    let out = recsim(&["aggregate", "--in", path(&out_dir), "--out", path(&summary_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["summary.csv", "curves_cindex.csv", "curves_error.csv", "distributions.csv"] {
        assert!(summary_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn seed_override_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("tiny.toml");
    fs::write(&manifest, TINY).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(recsim(&["run", "--manifest", path(&manifest), "--out", path(&a)]).status.success());
    assert!(recsim(&["run", "--manifest", path(&manifest), "--out", path(&b), "--seed", "6"]).status.success());
    assert_ne!(fs::read(a.join("raw.csv")).unwrap(), fs::read(b.join("raw.csv")).unwrap());
}

#[test]
fn invalid_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("bad.toml");
    fs::write(&manifest, "seed = 1\n[[roster]]\nmodel = \"Cox\"\n").unwrap();
    let out = recsim(&["run", "--manifest", path(&manifest), "--out", path(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    assert!(!recsim(&["run", "--manifest", "/nonexistent.toml", "--out", "x"]).status.success());
}
