use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_surgvae");

fn small_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/small.toml")
        .to_string_lossy()
        .into_owned()
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// One small synth + crossval shared by the tests below.
struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn data(&self) -> PathBuf {
        self.dir.path().join("small.csv")
    }
    fn out(&self) -> PathBuf {
        self.dir.path().join("cv")
    }
}

fn shared() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let shared = Run {
            dir: tempfile::tempdir().unwrap(),
        };
        let cfg = small_config();
        let synth = run(&["synth", "--config", &cfg, "--out", &s(&shared.data())]);
        assert!(synth.status.success(), "{}", String::from_utf8_lossy(&synth.stderr));
        let cv = run(&["crossval", "--data", &s(&shared.data()), "--config", &cfg, "--out", &s(&shared.out())]);
        assert!(cv.status.success(), "{}", String::from_utf8_lossy(&cv.stderr));
        shared
    })
}

#[test]
fn crossval_writes_report_predictions_and_checkpoints() {
    let r = shared();
    let report: Value = serde_json::from_str(&fs::read_to_string(r.out().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 3);
    let macro_auroc = report["aggregate"]["macro_auroc"]["value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&macro_auroc));
    assert!(report["baseline_comparison"]["aggregate"]["macro_auroc"]["value"].is_f64());
    for k in 0..3 {
        assert!(r.out().join(format!("checkpoints/fold_{k}.json")).exists());
    }
    let preds = fs::read_to_string(r.out().join("predictions.csv")).unwrap();
    let header = preds.lines().next().unwrap();
    assert!(header.starts_with("case_id,fold,"));
    // every target-group row appears exactly once
    assert_eq!(preds.lines().count() - 1, 200);
    assert!(r.out().join("plots").read_dir().unwrap().count() > 0);
    assert!(r.data().with_file_name("small.oracle.csv").exists());
}

#[test]
fn explain_percentages_sum_to_100() {
    let r = shared();
    let out = r.dir.path().join("explain_arrest.csv");
    let ck = r.out().join("checkpoints/fold_0.json");
    let o = run(&["explain", "--checkpoint", &s(&ck), "--data", &s(&r.data()), "--outcome", "arrest", "--out", &s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let total: f64 = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 100.0).abs() < 1e-6);
    assert_eq!(text.lines().count() - 1, 16);
}

#[test]
fn project_writes_coordinates_for_the_target_group() {
    let r = shared();
    let out = r.dir.path().join("proj.csv");
    let ck = r.out().join("checkpoints/fold_0.json");
    let o = run(&["project", "--checkpoint", &s(&ck), "--data", &s(&r.data()), "--out", &s(&out), "--perplexity", "10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("case_id,dim1,dim2,group"));
    assert!(text.lines().count() > 1);
}

#[test]
fn baseline_writes_a_report() {
    let r = shared();
    let out = r.dir.path().join("lr.json");
    let o = run(&["baseline", "--data", &s(&r.data()), "--config", &small_config(), "--out", &s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert!(report["aggregate"]["macro_auroc"]["value"].is_f64());
}

#[test]
fn unknown_outcome_is_a_usage_error() {
    let r = shared();
    let ck = r.out().join("checkpoints/fold_0.json");
    let out = r.dir.path().join("bad.csv");
    let o = run(&["explain", "--checkpoint", &s(&ck), "--data", &s(&r.data()), "--outcome", "gout", "--out", &s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("arrest"));
}

#[test]
fn missing_data_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "crossval",
        "--data",
        &s(&dir.path().join("absent.csv")),
        "--config",
        &small_config(),
        "--out",
        &s(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let o = run(&["synth", "--config", &s(&cfg), "--out", &s(&dir.path().join("d.csv"))]);
    assert_eq!(o.status.code(), Some(2));
}
