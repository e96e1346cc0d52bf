//! The `oscavg` binary driven end to end through config files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use oscavg_cli::commands::SimulateSummary;
use oscavg_cli::output::{read_csv, read_report};
use oscavg_core::harness::{StabilityProbeReport, SweepReport};

fn run(dir: &Path, config: &str) -> Output {
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_oscavg"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .arg("--quiet")
        .output()
        .unwrap()
}

fn out(dir: &Path, name: &str) -> PathBuf {
    dir.join("out").join(name)
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn default_simulate_starts_at_the_reference_point() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), r#"{"command": "simulate", "horizon": 1.0}"#);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty(), "--quiet prints nothing");
    let table = read_csv(&out(dir.path(), "trajectory.csv")).unwrap();
    assert_eq!(table.header.len(), 18);
    assert_eq!(table.header[15], "c_at_center");
    let first = &table.rows[0];
    assert_eq!(&first[1..4], &[6.0, 2.0, -2.0]);
    assert_eq!(&first[4..13], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    assert!((first[15] + 3.135494).abs() < 1e-6, "{}", first[15]);
    let (cmd, summary): (String, SimulateSummary) = read_report(&out(dir.path(), "simulate_summary.json")).unwrap();
    assert_eq!(cmd, "simulate");
    assert_eq!(summary.rows, table.rows.len());
    assert_eq!(*table.rows.last().unwrap().first().unwrap(), 1.0);
}

#[test]
fn zero_horizon_writes_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), r#"{"command": "simulate", "horizon": 0.0}"#);
    assert_eq!(code(&o), 0);
    assert_eq!(read_csv(&out(dir.path(), "trajectory.csv")).unwrap().rows.len(), 1);
}

#[test]
fn invalid_configs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), r#"{"command": "simulate", "omega": -2.0}"#);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("omega"));
    let o = run(dir.path(), r#"{"command": "simulate", "omegaa": 2.0}"#);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("omegaa"));
    assert_eq!(code(&run(dir.path(), r#"{"command": "average-check", "samples": 0}"#)), 1);
    assert_eq!(code(&run(dir.path(), r#"{"command": "sweep", "omegas": [10.0, 20.0]}"#)), 1);
    assert_eq!(code(&run(dir.path(), r#"{"command": "bvp-check", "cases": []}"#)), 1);
    let probe = r#"{"command": "stability-probe", "epsilon_x": 1.0, "epsilon_z": 1.0, "deltas": [], "omegas": [12.0], "horizon": 5.0}"#;
    assert_eq!(code(&run(dir.path(), probe)), 1);
    assert_eq!(code(&run(dir.path(), "not json")), 1);
}

#[test]
fn unwritable_output_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    // `out` is a file, so the output directory cannot be created.
    std::fs::write(dir.path().join("out"), "").unwrap();
    let o = run(dir.path(), r#"{"command": "simulate", "horizon": 0.0}"#);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("out"));
}

#[test]
fn zero_tolerance_average_check_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), r#"{"command": "average-check", "samples": 3, "tolerance": 0.0}"#);
    assert_eq!(code(&o), 3);
    assert!(out(dir.path(), "average_check.json").exists(), "report is written even on failure");
}

#[test]
fn starved_quadrature_fails_the_bvp_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), r#"{"command": "bvp-check", "panels": 8, "cases": ["cosine", "jordan"]}"#);
    assert_eq!(code(&o), 3);
}

#[test]
fn linear_ladder_converges_at_first_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"command": "sweep", "system": "linear-test", "omegas": [8.0, 16.0, 32.0, 64.0],
                  "horizon": 2.0, "stride": 1, "max_slope": -0.9}"#;
    let o = run(dir.path(), cfg);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (_, report): (String, SweepReport) = read_report(&out(dir.path(), "sweep.json")).unwrap();
    assert!(report.slope.unwrap() <= -0.9);
    // Lossless: the report survives a second trip through the file format.
    let again = serde_json::to_string(&report).unwrap();
    assert_eq!(serde_json::from_str::<SweepReport>(&again).unwrap(), report);
}

#[test]
fn averaged_probe_passes_item_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"command": "stability-probe", "model": "averaged", "epsilon_x": 0.5, "epsilon_z": 1.0,
                  "deltas": [[6.0, 0.0], [0.0, 0.0]], "horizon": 200.0}"#;
    let o = run(dir.path(), cfg);
    assert_eq!(code(&o), 0);
    let (_, report): (String, StabilityProbeReport) = read_report(&out(dir.path(), "stability_probe.json")).unwrap();
    assert!(report.shells.iter().all(|s| s.item2));
    assert!(report.shells[1].item1, "containment holds trivially on the target set");
}

#[test]
fn absent_omega_star_is_a_verdict_not_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"command": "stability-probe", "epsilon_x": 0.01, "epsilon_z": 0.01,
                  "deltas": [[1.0, 0.0]], "omegas": [12.566370614359172], "horizon": 2.0}"#;
    let o = run(dir.path(), cfg);
    assert_eq!(code(&o), 0);
    let (_, report): (String, StabilityProbeReport) = read_report(&out(dir.path(), "stability_probe.json")).unwrap();
    assert_eq!(report.shells[0].omega_star_item2, None);
}

#[test]
fn boundary_layer_simulation_recovers_the_slow_rate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"command": "simulate", "system": "boundary-layer", "omega": 10.0, "horizon": 1.0,
                  "stride": 1, "initial": {"filter_init": "zero"}}"#;
    assert_eq!(code(&run(dir.path(), cfg)), 0);
    let (_, s): (String, SimulateSummary) = read_report(&out(dir.path(), "simulate_summary.json")).unwrap();
    let fit = s.boundary_layer.unwrap();
    assert!((fit.lambda - 1.0).abs() < 0.05, "{fit:?}");
    let t = read_csv(&out(dir.path(), "trajectory.csv")).unwrap();
    assert_eq!(t.header, ["t", "x1", "y1", "y2", "z_norm"]);
}
