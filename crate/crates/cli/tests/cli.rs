use std::path::Path;
use std::process::Command;

const SMALL: &str = r#"
[sets.poisson]
triples = [{ atoms = [[1.0, 1.0]] }]

[grids.g]
t_end = 1.0
steps = 20

[spaces.s]
x_min = -1.5
x_max = 4.5
nodes = 61

[[experiment]]
id = "pide"
kind = "pide"
set = "poisson"
space = "s"
horizon = 1.0
steps = 100
payoff = { fn = "min", cap = 2.0 }
reference = { oracle = "poisson-capped", rate = 1.0, cap = 2.0, horizon = 1.0 }
tolerance = { rel = 0.02 }
detail_every = 50

[[experiment]]
id = "mc"
kind = "expectation"
set = "poisson"
grid = "g"
functional = { payoff = { fn = "min", cap = 2.0 } }
samples = 4000
seed = 1
reference = { experiment = "pide" }
tolerance = { se = 4.0 }
"#;

fn glevy(dir: &Path, config: &str, extra: &[&str]) -> std::process::Output {
    let path = dir.join("run.toml");
    std::fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_glevy"))
        .arg(&path)
        .args(extra)
        .output()
        .expect("binary runs")
}

#[test]
fn passing_run_writes_summary_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = glevy(dir.path(), SMALL, &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    // default output directory is relative to the config file
    let summary = std::fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    let lines: Vec<_> = summary.lines().collect();
    assert_eq!(
        lines[0],
        "experiment_id,kind,value,std_error,tolerance,pass,seconds"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("pide,pide,") && lines[1].ends_with(",true,"));
    assert!(lines[2].starts_with("mc,expectation,") && lines[2].ends_with(",true,"));
    assert!(dir.path().join("out/pide.csv").exists());
}

#[test]
fn failing_check_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace("tolerance = { rel = 0.02 }", "tolerance = { abs = 1e-9 }");
    let out = glevy(dir.path(), &cfg, &["-o", "elsewhere"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("FAIL pide"));
}

#[test]
fn only_reports_the_selected_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("only");
    let out = glevy(
        dir.path(),
        SMALL,
        &["--only", "mc", "-o", o.to_str().unwrap()],
    );
    assert!(out.status.success());
    let summary = std::fs::read_to_string(o.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    assert!(summary.lines().nth(1).unwrap().starts_with("mc,"));
}

#[test]
fn timings_fill_the_seconds_column() {
    let dir = tempfile::tempdir().unwrap();
    let out = glevy(dir.path(), SMALL, &["--timings", "--only", "pide"]);
    assert!(out.status.success());
    let summary = std::fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert!(!summary.lines().nth(1).unwrap().ends_with(','));
}

#[test]
fn invalid_config_exits_two_with_all_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL
        .replace("atoms = [[1.0, 1.0]]", "atoms = [[0.0, 1.0]]")
        .replace("grid = \"g\"", "grid = \"missing\"");
    let out = glevy(dir.path(), &cfg, &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("origin"), "{err}");
    assert!(err.contains("missing"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_only_id_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = glevy(dir.path(), SMALL, &["--only", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_config_is_a_trivial_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = glevy(dir.path(), "", &[]);
    assert!(out.status.success());
    let summary = std::fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1);
}
