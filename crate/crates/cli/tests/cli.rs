use std::fs;
use std::path::Path;
use std::process::Command;

const SMALL: &str = r#"
[synthetic]
n_users = 8
n_outcomes = 4
seeds = [3, 4]

[grouping]
n_types = 4
"#;

fn tou(dir: &Path, config: &str, args: &[&str]) -> (i32, String) {
    let cfg = dir.join("config_in.toml");
    fs::write(&cfg, config).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tou"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap();
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    (out.status.code().unwrap_or(-1), stderr)
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join("out").join(name)).unwrap()
}

#[test]
fn optimize_writes_artifacts_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(tou(a.path(), SMALL, &["optimize", "--verify-grid"]).0, 0);
    assert_eq!(tou(b.path(), SMALL, &["optimize", "--verify-grid"]).0, 0);
    for f in ["results.json", "config.toml", "trace_dist3_fixed_pt.csv", "responses_dist4_fixed_pi.csv"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(a.path(), "manifest.json")).unwrap();
    assert_eq!(manifest["command"], "optimize");
    assert!(manifest["timestamp_unix"].as_u64().unwrap() > 0);
    assert!(read(a.path(), "trace_dist3_fixed_pt.csv").starts_with("candidate_pdelta,social_cost"));
}

#[test]
fn snapshot_reproduces_run() {
    let a = tempfile::tempdir().unwrap();
    assert_eq!(tou(a.path(), SMALL, &["benchmark"]).0, 0);
    let snapshot = read(a.path(), "config.toml");
    let b = tempfile::tempdir().unwrap();
    assert_eq!(tou(b.path(), &snapshot, &["benchmark"]).0, 0);
    assert_eq!(read(a.path(), "ratios.json"), read(b.path(), "ratios.json"));
    assert_eq!(read(b.path(), "config.toml"), snapshot);
}

#[test]
fn single_type_schemes_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace("n_types = 4", "n_types = 1");
    assert_eq!(tou(dir.path(), &cfg, &["optimize"]).0, 0);
    assert_eq!(
        read(dir.path(), "responses_dist3_fixed_pt.csv"),
        read(dir.path(), "responses_dist3_fixed_pi.csv")
    );
}

#[test]
fn tightness_benchmark_reaches_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[data]\nsource = \"tightness\"\n[periods]\npeak_hours = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11]\n";
    let (code, err) = tou(dir.path(), cfg, &["benchmark"]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&read(dir.path(), "ratios.json")).unwrap();
    let k = v[0]["ratios"]["kappa_pt"].as_f64().unwrap();
    assert!((k - 2.0).abs() < 0.04, "{k}");
}

#[test]
fn sweep_and_lambda_emit_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL}\n[sweep]\ntheta_bar = [5.0, 500.0]\np_delta = [0.0, 10.0]\n");
    assert_eq!(tou(dir.path(), &cfg, &["sweep", "--axis", "theta_bar"]).0, 0);
    let csv = read(dir.path(), "sweep_theta_bar.csv");
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("theta_bar,kappa_pt"));
    assert_eq!(tou(dir.path(), &cfg, &["sweep", "--axis", "lambda"]).0, 0);
    assert_eq!(read(dir.path(), "lambda.csv").lines().count(), 5);
}

#[test]
fn verify_passes_and_bad_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tou(dir.path(), SMALL, &["verify", "--verify-grid"]).0, 0);
    assert_eq!(tou(dir.path(), SMALL, &["sweep", "--axis", "nope"]).0, 2);
    assert_eq!(tou(dir.path(), "[storage]\ndelta_s = 0.9\n", &["optimize"]).0, 2);
    assert_eq!(tou(dir.path(), "unknown_key = 1\n", &["optimize"]).0, 2);
    let csv = "[data]\nsource = \"csv\"\npath = \"missing.csv\"\n";
    assert_eq!(tou(dir.path(), csv, &["ingest"]).0, 2);
}

#[test]
fn ingest_converts_hourly_csv() {
    let dir = tempfile::tempdir().unwrap();
    let hours: Vec<String> = (0..24).map(|h| format!("h{h}")).collect();
    let mut rows = format!("day,entity,{}\n", hours.join(","));
    for day in ["2018-06-01", "2018-06-02"] {
        for id in ["a", "b"] {
            let vals: Vec<String> = (0..24).map(|h| format!("{}.5", 1 + h % 3)).collect();
            rows.push_str(&format!("{day},{id},{}\n", vals.join(",")));
        }
    }
    fs::write(dir.path().join("loads.csv"), rows).unwrap();
    let cfg = "[data]\nsource = \"csv\"\npath = \"loads.csv\"\n";
    let (code, err) = tou(dir.path(), cfg, &["ingest"]);
    assert_eq!(code, 0, "{err}");
    let info: serde_json::Value = serde_json::from_str(&read(dir.path(), "ingest.json")).unwrap();
    assert_eq!(info["entities"], 2);
    assert_eq!(info["outcomes"], 2);
}
