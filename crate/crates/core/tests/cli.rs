use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpsim")).args(args).output().expect("spawn cpsim")
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn rows(p: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(p).unwrap();
    r.records().map(Result::unwrap).collect()
}

fn short_circuit(dir: &TempDir) -> PathBuf {
    let cfg = path(dir, "short.toml");
    std::fs::write(&cfg, "[scenario]\nduration = 60\nn_parked = 20\n").unwrap();
    let trace = path(dir, "trace.csv");
    let out = run(&["gen", "--kind", "circuit", "--config", s(&cfg), "--seed", "3", "--out", s(&trace)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    trace
}

#[test]
fn gen_writes_a_trace_with_the_documented_header() {
    let dir = tempfile::tempdir().unwrap();
    let trace = short_circuit(&dir);
    let text = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().next(), Some("t,id,x,y,vx,vy,kind"));
    assert!(text.lines().count() > 60);
}

#[test]
fn gen_is_reproducible_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.csv", "b.csv", "c.csv"] {
        let seed = if name == "c.csv" { "8" } else { "7" };
        assert!(run(&["gen", "--kind", "town", "--seed", seed, "--out", s(&path(&dir, name))]).status.success());
    }
    let read = |n| std::fs::read(path(&dir, n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_ne!(read("a.csv"), read("c.csv"));
}

#[test]
fn missing_or_malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(&path(&dir, "t.csv")).to_string();
    let missing = run(&["gen", "--config", s(&path(&dir, "nope.toml")), "--out", &out]);
    assert_eq!(missing.status.code(), Some(2));

    let bad = path(&dir, "bad.toml");
    std::fs::write(&bad, "[run]\nn_runz = 3\n").unwrap();
    assert_eq!(run(&["gen", "--config", s(&bad), "--out", &out]).status.code(), Some(2));

    std::fs::write(&bad, "[scenario]\nduration = 0\n").unwrap();
    assert_eq!(run(&["gen", "--config", s(&bad), "--out", &out]).status.code(), Some(2));
}

#[test]
fn unknown_flags_exit_2_and_help_succeeds() {
    assert_eq!(run(&["sim", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
    let help = run(&["--help"]);
    assert!(help.status.success());
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["gen", "sim", "coverage"] {
        assert!(text.contains(sub));
    }
}

#[test]
fn sim_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let trace = short_circuit(&dir);
    let results = path(&dir, "results.csv");
    let out = run(&[
        "sim", "--trace", s(&trace), "--n-runs", "2", "--sigma-r", "0.2", "--zone", "15", "--out", s(&results),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let header = std::fs::read_to_string(&results).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("vehicle,mode,algorithm,sigma_r,zone,n_runs,mean_rmse"));
    let table = rows(&results);
    assert_eq!(table.len(), 4);
    assert!(table.iter().all(|r| &r[5] == "2"));
    assert!(!String::from_utf8_lossy(&out.stdout).trim().is_empty());
}

#[test]
fn sim_filters_algorithm_and_dumps_steps() {
    let dir = tempfile::tempdir().unwrap();
    let trace = short_circuit(&dir);
    let results = path(&dir, "ekf.csv");
    let out = run(&[
        "sim", "--trace", s(&trace), "--n-runs", "2", "--sigma-r", "4", "--zone", "15", "--zone", "100", "--algorithm",
        "ekf", "--mode", "proposed", "--dump-steps", "--out", s(&results),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = rows(&results);
    assert_eq!(table.len(), 2);
    assert!(table.iter().all(|r| &r[1] == "proposed" && &r[2] == "ekf"));
    let steps = path(&dir, "ekf.steps.csv");
    assert!(steps.exists());
    assert!(std::fs::read_to_string(steps).unwrap().lines().count() > 1);
}

#[test]
fn sim_rejects_a_missing_trace_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["sim", "--trace", s(&path(&dir, "absent.csv")), "--n-runs", "1", "--out", s(&path(&dir, "r.csv"))]);
    assert_ne!(out.status.code(), Some(0));
}

fn square_fixture(dir: &TempDir) -> (PathBuf, PathBuf) {
    let area = path(dir, "area.csv");
    std::fs::write(&area, "polygon,x,y\nsq,0,0\nsq,100,0\nsq,100,100\nsq,0,100\n").unwrap();
    let parked = path(dir, "parked.csv");
    std::fs::write(&parked, "x,y\n50,50\n").unwrap();
    (area, parked)
}

#[test]
fn coverage_class_maps_to_radius() {
    let dir = tempfile::tempdir().unwrap();
    let (area, parked) = square_fixture(&dir);
    let out = path(&dir, "cov.csv");
    let res = run(&["coverage", "--area", s(&area), "--parked", s(&parked), "--class", "A", "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let table = rows(&out);
    assert_eq!(table.len(), 1);
    assert_eq!(table[0][0].parse::<f64>().unwrap(), 15.0);
}

#[test]
fn coverage_fractions_match_the_disk_area() {
    let dir = tempfile::tempdir().unwrap();
    let (area, parked) = square_fixture(&dir);
    let out = path(&dir, "cov.csv");
    let res = run(&[
        "coverage", "--area", s(&area), "--parked", s(&parked), "--radius", "15", "--radius", "100", "--cell-size", "0.5",
        "--out", s(&out),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let table = rows(&out);
    assert_eq!(table.len(), 2);
    let f = |r: &csv::StringRecord, i: usize| r[i].parse::<f64>().unwrap();
    let disk = std::f64::consts::PI * 225.0 / 10_000.0;
    assert!((f(&table[0], 3) - disk).abs() < 0.005);
    assert!((f(&table[0], 4) - (1.0 - disk)).abs() < 0.005);
    assert_eq!(f(&table[1], 3), 1.0);
    for r in &table {
        let sum: f64 = (1..5).map(|i| f(r, i)).sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }
}

#[test]
fn coverage_rejects_an_empty_area() {
    let dir = tempfile::tempdir().unwrap();
    let (_, parked) = square_fixture(&dir);
    let area = path(&dir, "empty.csv");
    std::fs::write(&area, "polygon,x,y\n").unwrap();
    let res = run(&["coverage", "--area", s(&area), "--parked", s(&parked), "--radius", "15", "--out", s(&path(&dir, "c.csv"))]);
    assert_ne!(res.status.code(), Some(0));
    assert!(!res.stderr.is_empty());
}
