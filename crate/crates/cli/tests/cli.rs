//! End-to-end runs of the `magscan` binary.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use magscan::{Axis, CalibrationPlan, CalibrationReport, InstrumentTruth, Trace};

fn magscan() -> Command {
    Command::new(env!("CARGO_BIN_EXE_magscan"))
}

fn run(args: &[&str]) -> Output {
    magscan().args(args).output().expect("spawn magscan")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited by signal")
}

#[test]
fn simulate_writes_traces_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["simulate", "--preset", "bf-fig3", "--axis", "z", "--points", "60", "--svg", "-o", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for ch in ["CPT", "MM_z"] {
        let csv = dir.path().join(format!("bf-fig3_BZ_{ch}.csv"));
        let t = Trace::read_csv(BufReader::new(fs::File::open(&csv).unwrap())).unwrap();
        assert_eq!(t.len(), 60);
        assert!(t.metadata.is_some());
        assert!(dir.path().join(format!("bf-fig3_BZ_{ch}.svg")).exists());
    }
    let manifest: toml::Table = toml::from_str(&fs::read_to_string(dir.path().join("manifest.toml")).unwrap()).unwrap();
    assert_eq!(manifest["command"].as_str(), Some("simulate"));
    assert_eq!(manifest["scan"].as_array().unwrap().len(), 1);
}

#[test]
fn print_config_round_trips() {
    let o = run(&["simulate", "--preset", "arc-fig4", "--axis", "x", "--print-config"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let cfg: magscan::ExperimentConfig = toml::from_str(&text).unwrap();
    assert_eq!(cfg, magscan::ExperimentConfig::arc_fig4(Axis::X));
}

#[test]
fn detect_labels_simulated_features() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["simulate", "--preset", "bf-fig3", "--axis", "z", "--channels", "cpt", "-o", out]);
    assert_eq!(code(&o), 0);
    let csv = dir.path().join("bf-fig3_BZ_CPT.csv");
    let o = run(&["detect", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["format"], "magscan-features");
    assert_eq!(lines[0]["channel"], "CPT");
    let ns: Vec<i64> = lines[1..].iter().map(|f| f["n"].as_i64().unwrap()).collect();
    assert_eq!(ns, vec![2, 4, -4, -2]);
}

#[test]
fn detect_rejects_malformed_trace() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "control,value\n1,2\n").unwrap();
    assert_eq!(code(&run(&["detect", bad.to_str().unwrap()])), 7);
    assert_eq!(code(&run(&["detect", dir.path().join("missing.csv").to_str().unwrap()])), 3);
}

#[test]
fn demod_pure_tone() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tone.csv");
    let mut f = fs::File::create(&path).unwrap();
    writeln!(f, "t,value").unwrap();
    for k in 0..6000 {
        let t = k as f64 / 10_000.0;
        writeln!(f, "{t},{}", 0.2 + 0.04 * (std::f64::consts::TAU * 440.0 * t).sin()).unwrap();
    }
    drop(f);
    let o = run(&["demod", path.to_str().unwrap(), "--freq", "440"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: f64 = String::from_utf8(o.stdout).unwrap().trim().parse().unwrap();
    assert!((v - 0.02).abs() < 1e-4, "{v}");
}

#[test]
fn bundled_configs_match_demo() {
    let truth: InstrumentTruth = toml::from_str(&fs::read_to_string(configs().join("demo_instrument.toml")).unwrap()).unwrap();
    assert_eq!(truth, InstrumentTruth::demo());
    let plan: CalibrationPlan = toml::from_str(&fs::read_to_string(configs().join("demo_plan.toml")).unwrap()).unwrap();
    assert_eq!(plan, CalibrationPlan::demo());
}

#[test]
fn calibrate_in_process_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let inst = configs().join("demo_instrument.toml");
    let plan = configs().join("demo_plan.toml");
    let o = run(&[
        "calibrate",
        "--instrument",
        inst.to_str().unwrap(),
        "--plan",
        plan.to_str().unwrap(),
        "--json",
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = CalibrationReport::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    for (axis, f) in [(Axis::X, 0.6), (Axis::Y, 0.6), (Axis::Z, 3.1)] {
        let got = report.pair_factor(axis).unwrap();
        assert!((got - f).abs() < 0.02 * f, "{axis}: {got}");
    }
    for name in ["report.txt", "report.json", "report.csv", "manifest.toml"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
}

#[test]
fn calibrate_usage_and_connection_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = CalibrationPlan::demo();
    plan.conventional = None;
    let path = dir.path().join("plan.toml");
    fs::write(&path, toml::to_string(&plan).unwrap()).unwrap();
    assert_eq!(code(&run(&["calibrate", "--plan", path.to_str().unwrap(), "--baseline"])), 2);
    fs::write(&path, "delta_rf = \"fast\"\n").unwrap();
    assert_eq!(code(&run(&["calibrate", "--plan", path.to_str().unwrap()])), 2);
    assert_eq!(code(&run(&["calibrate", "--endpoint", "not an endpoint"])), 2);
    // nothing listens on the discard port
    assert_eq!(code(&run(&["calibrate", "--endpoint", "127.0.0.1:9"])), 4);
}

/// Kills the child on drop so a failing assertion does not leak a server.
struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn calibrate_against_served_instrument() {
    let child = magscan()
        .args(["serve", "--endpoint", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .expect("spawn server");
    let mut server = Server(child);
    let mut line = String::new();
    BufReader::new(server.0.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let endpoint = line.trim().strip_prefix("listening on ").expect("listening line").to_string();
    let o = run(&["calibrate", "--endpoint", &endpoint, "--json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let remote = CalibrationReport::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    let o = run(&["calibrate", "--json"]);
    let local = CalibrationReport::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(remote.max_relative_difference(&local), Some(0.0));
}
