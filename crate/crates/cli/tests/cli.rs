use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"{
  "params": {"K": 2, "B": 2, "delta_max": 4, "beta": 0.3, "p_t": 0.5, "q": [0.2, 0.3], "lambda": [0.2, 0.2]},
  "protocol": {"horizon": 300, "replications": 8, "seed": 3},
  "samplepath": {"horizon": 50, "replication": 2},
  "sweeps": [
    {"name": "beta", "axis": "beta", "values": [0.2, 0.6]},
    {"name": "bad", "axis": "q_all", "values": [0.3, 0.6], "policies": [{"kind": "greedy"}]}
  ]
}"#;

fn vaoi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vaoi"))
        .args(args)
        .env_remove("VAOI_THREADS")
        .output()
        .expect("binary runs")
}

fn setup(config: &str) -> (TempDir, String, String) {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, config).unwrap();
    let out = dir.path().join("out");
    let (cfg, out) = (cfg.display().to_string(), out.display().to_string());
    (dir, cfg, out)
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn missing_config_fails_with_diagnostic() {
    let o = vaoi(&["solve", "--config", "/nonexistent/config.json"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("reading config"), "{err}");
}

#[test]
fn oversized_instance_names_state_count() {
    let (_d, cfg, out) = setup(
        r#"{"params": {"K": 6, "B": 5, "delta_max": 9, "beta": 0.2, "p_t": 0.5,
            "q": [0.1, 0.1, 0.1, 0.1, 0.1, 0.1], "lambda": [0.2, 0.2, 0.2, 0.2, 0.2, 0.2]}}"#,
    );
    let o = vaoi(&["solve", "--config", &cfg, "--out", &out]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("60000000"), "{err}");
}

#[test]
fn unknown_config_field_is_rejected() {
    let (_d, cfg, out) = setup(&SMALL.replace("\"seed\": 3", "\"seed\": 3, \"sed\": 4"));
    let o = vaoi(&["solve", "--config", &cfg, "--out", &out]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn solve_then_check() {
    let (_d, cfg, out) = setup(SMALL);
    let o = vaoi(&["solve", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["policy.csv", "values.csv", "solve_report.json", "thresholds.csv"] {
        let text = fs::read_to_string(Path::new(&out).join(f)).unwrap();
        assert!(text.contains("config_fingerprint"), "{f}");
    }
    let o = vaoi(&["check", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(&out).join("structure_report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    assert_eq!(report["accessibility"]["closed_classes"], 1);
    assert!(report["monotonicity"]["pairs_checked"].as_u64().unwrap() > 0);
}

#[test]
fn check_flags_a_tampered_policy() {
    let (_d, cfg, out) = setup(SMALL);
    assert!(vaoi(&["solve", "--config", &cfg, "--out", &out]).status.success());
    // Flip the action of one causal state (b=1, ages 3, delta_c 3): index 1*125 + 3*25 + 3*5 + 3.
    let path = Path::new(&out).join("policy.csv");
    let text = fs::read_to_string(&path).unwrap();
    let target = 125 + 75 + 15 + 3;
    let flipped: Vec<String> = text
        .lines()
        .map(|l| match l.split_once(',') {
            Some((idx, a)) if idx == target.to_string() => format!("{idx},{}", if a == "0" { 1 } else { 0 }),
            _ => l.to_string(),
        })
        .collect();
    fs::write(&path, flipped.join("\n") + "\n").unwrap();
    let o = vaoi(&["check", "--config", &cfg, "--out", &out]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn check_rejects_policy_for_other_params() {
    let (_d, cfg, out) = setup(SMALL);
    assert!(vaoi(&["solve", "--config", &cfg, "--out", &out]).status.success());
    let (_d2, cfg2, out2) = setup(&SMALL.replace("\"beta\": 0.3", "\"beta\": 0.4"));
    let policy = Path::new(&out).join("policy.csv").display().to_string();
    let o = vaoi(&["check", "--config", &cfg2, "--out", &out2, "--policy", &policy]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fingerprint"));
}

#[test]
fn samplepath_shares_exogenous_draws() {
    let (_d, cfg, out) = setup(SMALL);
    let o = vaoi(&["samplepath", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let opt = csv_rows(&Path::new(&out).join("samplepath_optimal.csv"));
    let greedy = csv_rows(&Path::new(&out).join("samplepath_greedy.csv"));
    assert_eq!(opt.len(), 50);
    assert_eq!(greedy.len(), 50);
    for (a, b) in opt.iter().zip(&greedy) {
        assert_eq!(a[0], b[0]);
        assert_eq!(a[5..], b[5..], "request/e/z columns differ");
    }
}

#[test]
fn sweep_marks_invalid_points_and_continues() {
    let (_d, cfg, out) = setup(SMALL);
    let o = vaoi(&["sweep", "--config", &cfg, "--out", &out]);
    assert_eq!(o.status.code(), Some(4));
    let beta = csv_rows(&Path::new(&out).join("beta.csv"));
    assert_eq!(beta.len(), 6);
    assert!(beta.iter().all(|r| r[2] != "NaN"));
    let bad = csv_rows(&Path::new(&out).join("bad.csv"));
    assert_eq!(bad.len(), 2);
    assert_ne!(bad[0][2], "NaN");
    assert_eq!(bad[1][2], "NaN");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(&out).join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(
        manifest["sweeps"][1]["points"][1]["errors"].as_array().unwrap().len(),
        1
    );

    let o = vaoi(&[
        "sweep", "--config", &cfg, "--out", &out, "--only", "beta", "--seed", "9",
    ]);
    assert!(o.status.success());
    let o = vaoi(&["sweep", "--config", &cfg, "--out", &out, "--only", "nope"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn oracle_agrees_with_solver() {
    let (_d, cfg, out) = setup(
        r#"{"params": {"K": 1, "B": 1, "delta_max": 2, "beta": 0.3, "p_t": 0.6, "q": [0.4], "lambda": [0.0]},
            "solver": {"epsilon": 1e-11}}"#,
    );
    assert!(vaoi(&["oracle", "--config", &cfg, "--out", &out]).status.success());
    assert!(vaoi(&["solve", "--config", &cfg, "--out", &out]).status.success());
    let read = |f: &str| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(Path::new(&out).join(f)).unwrap()).unwrap()
    };
    let oracle = read("oracle.json");
    let solve = read("solve_report.json");
    assert_eq!(oracle["policies_evaluated"], 512);
    let diff = oracle["gain"].as_f64().unwrap() - solve["report"]["gain"].as_f64().unwrap();
    assert!(diff.abs() < 1e-8, "{diff}");
}

#[test]
fn thread_count_does_not_change_artifacts() {
    let (_d, cfg, out) = setup(SMALL);
    let out2 = format!("{out}2");
    assert!(vaoi(&["samplepath", "--config", &cfg, "--out", &out, "--threads", "1"])
        .status
        .success());
    assert!(
        vaoi(&["samplepath", "--config", &cfg, "--out", &out2, "--threads", "3"])
            .status
            .success()
    );
    for f in ["samplepath_optimal.csv", "samplepath_greedy.csv"] {
        assert_eq!(
            fs::read(Path::new(&out).join(f)).unwrap(),
            fs::read(Path::new(&out2).join(f)).unwrap()
        );
    }
    assert_eq!(
        vaoi(&["solve", "--config", &cfg, "--threads", "0"]).status.code(),
        Some(1)
    );
}
