use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
horizons = [20]

[input]
kind = "synthetic"

[input.script]
universe_size = 30
start_date = "2020-01-02"
heteroscedasticity = 1.0
stress_tracks_efficacy = false
segments = [
    { start = 0, end = 249, target_ic = 0.2, noise_scale = 1.0, stress_level = 0.4 },
    { start = 250, end = 319, target_ic = -0.05, noise_scale = 1.0, stress_level = 0.5 },
    { start = 320, end = 599, target_ic = 0.2, noise_scale = 1.0, stress_level = 0.4 },
]

[folds]
n_folds = 10
embargo = 90
min_train_folds = 2

[gbt]
n_estimators = 10
"#;

fn rankguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rankguard"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn generate_writes_panel() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("gen");
    let o = rankguard(&["--config", &cfg, "--out", out.to_str().unwrap(), "generate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("panel.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("date,"), "{header}");
    assert_eq!(csv.lines().count(), 1 + 600 * 30);
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    let o = rankguard(&["--config", &cfg, "--out", out, "run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["summary.json", "manifest.json", "config.toml", "gate.csv"] {
        assert!(Path::new(out).join(f).exists(), "missing {f}");
    }
    let printed = String::from_utf8(o.stdout).unwrap();

    let r = rankguard(&["--out", out, "report"]);
    assert!(r.status.success());
    let report = String::from_utf8(r.stdout).unwrap();
    assert_eq!(report, printed);
    assert!(report.contains("RankIC by horizon and period"));
    assert!(report.contains("gate_G"));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("gen");
    let o = rankguard(&["--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "99", "generate"]);
    assert!(o.status.success());
    let script = fs::read_to_string(out.join("script.json")).unwrap();
    assert!(script.contains("\"seed\": 99"), "{script}");
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("bogus_key = 1\n{TINY}"));
    let o = rankguard(&["--config", &cfg, "--out", dir.path().to_str().unwrap(), "generate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus_key"));
}

#[test]
fn missing_config_file_exits_3() {
    let o = rankguard(&["--config", "/nonexistent/run.toml", "generate"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn report_without_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = rankguard(&["--out", dir.path().to_str().unwrap(), "report"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn horizon_outside_grid_is_rejected() {
    let o = rankguard(&["--horizon", "30", "generate"]);
    assert_eq!(o.status.code(), Some(2));
}
