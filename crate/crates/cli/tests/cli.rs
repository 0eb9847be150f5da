use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trafficnet")).args(args).current_dir(dir).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Value after `key: ` on the first matching line.
fn field(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no `{key}` in output:\n{text}"))
        .to_string()
}

fn number(text: &str, key: &str) -> f64 {
    field(text, key).split_whitespace().next().unwrap().trim_end_matches('%').parse().unwrap()
}

/// Periodic arrivals on a three-cell line.
const LINE: &str = "\
scenario line
cell 0 kind=onramp tail=0 head=1 length=1 v=60 w=60 jam=inf
cell 1 kind=internal tail=1 head=2 length=1 v=60 w=60 jam=100
cell 2 kind=offramp tail=2 head=0 length=1 v=108 w=60 jam=100
inflow 0 piecewise 0:20 5:5 period=10
sim dt=30 horizon=60
";

#[test]
fn validate_accepts_builtins() {
    let dir = TempDir::new().unwrap();
    let o = run(&["validate", "--scenario", "@la"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(field(&stdout(&o), "cells"), "91");
    assert_eq!(field(&stdout(&o), "cfl"), "0.9028");
}

#[test]
fn simulate_writes_trajectory_and_conserves_vehicles() {
    let dir = TempDir::new().unwrap();
    let o = run(&["simulate", "--scenario", "@la", "--out", "sim"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(number(&stdout(&o), "max conservation residual") < 1e-9);
    assert!(number(&stdout(&o), "final l1 distance to free-flow equilibrium") < 1.0);
    let csv = fs::read_to_string(dir.path().join("sim/trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 92);
    assert_eq!((header[0], header[1], header[91]), ("t", "cell_0", "cell_90"));
    assert_eq!(lines.count(), 1081);
    assert!(dir.path().join("sim/total_volume.csv").exists());
    assert!(dir.path().join("sim/l1_to_free_flow.csv").exists());
}

#[test]
fn flags_override_step_and_horizon() {
    let dir = TempDir::new().unwrap();
    let o = run(&["simulate", "--scenario", "@la", "--dt", "5", "--horizon", "10", "--policy", "fifo"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(field(&stdout(&o), "steps"), "120");
    assert_eq!(field(&stdout(&o), "policy"), "fifo");
}

#[test]
fn compare_policies_orders_the_bottleneck_runs() {
    let dir = TempDir::new().unwrap();
    let args = ["compare-policies", "--scenario", "@la-bottleneck", "--theta", "0,0.8,1", "--out", "cmp"];
    let o = run(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("cmp/total_volume.csv")).unwrap();
    assert!(csv.starts_with("t,theta_0,theta_0.8,theta_1\n"));
    let last: Vec<f64> = csv.lines().last().unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert!(last[1] < last[2] && last[2] < last[3], "{last:?}");
    assert!(stdout(&o).contains("theta 1: ") && stdout(&o).contains("divergent"));
}

#[test]
fn thread_cap_does_not_change_results() {
    let dir = TempDir::new().unwrap();
    let args = ["compare-policies", "--scenario", "@la-bottleneck", "--theta", "0,1", "--horizon", "30"];
    let a = Command::new(env!("CARGO_BIN_EXE_trafficnet"))
        .args(args)
        .args(["--out", "one"])
        .env("TRAFFICNET_THREADS", "1")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(a.status.success(), "{}", stderr(&a));
    let b = run(&[&args[..], &["--out", "many"]].concat(), dir.path());
    assert!(b.status.success(), "{}", stderr(&b));
    let read = |d: &str| fs::read_to_string(dir.path().join(d).join("total_volume.csv")).unwrap();
    assert_eq!(read("one"), read("many"));
}

#[test]
fn select_reports_the_improvement() {
    let dir = TempDir::new().unwrap();
    let o = run(&["select", "--scenario", "@la-capacity8", "--out", "sel"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(number(&stdout(&o), "uncontrolled / controlled total") >= 3.0);
    let controls = fs::read_to_string(dir.path().join("sel/controls.csv")).unwrap();
    assert!(controls.starts_with("t,kind,cell_i,cell_j,value\n"));
    assert!(controls.lines().any(|l| l.split(',').nth(1) == Some("R")));
}

#[test]
fn periodic_selection_on_a_file_scenario() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("line.scn"), LINE).unwrap();
    let o = run(&["periodic", "--scenario", "line.scn", "--period", "10", "--out", "per"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(number(&stdout(&o), "wrap residual") < 1e-7);
    assert!(number(&stdout(&o), "two-period residual") < 1e-5);
    assert!(dir.path().join("per/controls.csv").exists());
}

#[test]
fn benchmark_dump_is_deterministic_and_loadable() {
    let dir = TempDir::new().unwrap();
    assert!(run(&["benchmark", "la-bottleneck", "--output", "a.scn"], dir.path()).status.success());
    assert!(run(&["benchmark", "la-bottleneck", "--output", "b.scn"], dir.path()).status.success());
    let a = fs::read(dir.path().join("a.scn")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.scn")).unwrap());
    let o = run(&["equilibrium", "--scenario", "a.scn", "--out", "eq"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(field(&stdout(&o), "outcome").starts_with("bounded"));
    assert!(dir.path().join("eq/dual_graph.dot").exists());
}

#[test]
fn parse_errors_name_line_and_field() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("bad.scn"), LINE.replace("v=108", "v=fast")).unwrap();
    let o = run(&["simulate", "--scenario", "bad.scn"], dir.path());
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("line 4") && err.contains("field `v`"), "{err}");
}

#[test]
fn unknown_policy_and_missing_file_fail() {
    let dir = TempDir::new().unwrap();
    let o = run(&["simulate", "--scenario", "@la", "--policy", "zipper"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown policy"));
    let o = run(&["simulate", "--scenario", "missing.scn"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing.scn"));
}
