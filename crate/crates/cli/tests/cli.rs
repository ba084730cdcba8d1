use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn out_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("membrane-lab-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn lab(args: &[&str], dir: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_membrane-lab"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn strip_wallclock(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("wallclock_ms");
            map.values_mut().for_each(strip_wallclock);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_wallclock),
        _ => {}
    }
}

#[test]
fn invalid_input_exits_with_code_2() {
    let dir = out_dir("invalid");
    assert_eq!(lab(&["simulate", "--preset", "no-such-preset"], &dir), 2);
    assert_eq!(lab(&["simulate", "--grid", "8", "--dt", "-1"], &dir), 2);
    assert_eq!(lab(&["simulate", "--grid", "8", "--dt", "0.3"], &dir), 2);
    assert_eq!(lab(&["simulate", "--preset", "degenerate-tiny", "--config", "presets/x.toml"], &dir), 2);
    assert_eq!(lab(&["energy-check", "--grid", "8", "--lemma", "9.9"], &dir), 2);
}

#[test]
fn nash_moser_reports_are_deterministic() {
    let (a, b) = (out_dir("nm-a"), out_dir("nm-b"));
    let args = ["nash-moser", "--grid", "8", "--levels", "2"];
    assert_eq!(lab(&args, &a), 0);
    assert_eq!(lab(&args, &b), 0);
    let mut ra = read_json(&a.join("convergence_report.json"));
    let mut rb = read_json(&b.join("convergence_report.json"));
    strip_wallclock(&mut ra);
    strip_wallclock(&mut rb);
    assert_eq!(ra, rb);
    for f in ["levels.csv", "final_v.bin", "config.toml"] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    assert_eq!(std::fs::read(a.join("final_v.bin")).unwrap(), std::fs::read(b.join("final_v.bin")).unwrap());
}

#[test]
fn simulate_writes_its_outputs() {
    let dir = out_dir("simulate");
    assert_eq!(lab(&["simulate", "--grid", "8"], &dir), 0);
    for f in ["constraint.csv", "trajectory.csv", "final_v.bin", "final_U.bin", "simulate.json", "config.toml"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let summary = read_json(&dir.join("simulate.json"));
    assert!(summary["max_constraint"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn resolved_config_round_trips() {
    let (a, b) = (out_dir("cfg-a"), out_dir("cfg-b"));
    assert_eq!(lab(&["energy-check", "--preset", "degenerate-tiny", "--grid", "8", "--lambda", "2"], &a), 0);
    let cfg = a.join("config.toml");
    assert_eq!(lab(&["energy-check", "--config", cfg.to_str().unwrap()], &b), 0);
    assert_eq!(std::fs::read_to_string(&cfg).unwrap(), std::fs::read_to_string(b.join("config.toml")).unwrap());
    let (mut ra, mut rb) = (read_json(&a.join("energy_report.json")), read_json(&b.join("energy_report.json")));
    strip_wallclock(&mut ra);
    strip_wallclock(&mut rb);
    assert_eq!(ra, rb);
}
