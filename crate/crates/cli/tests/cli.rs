use std::path::Path;
use std::process::{Command, Output};

use rlkd_cli::config::ExperimentConfig;
use rlkd_cli::report::MetricsReport;
use rlkd_core::datasets::load_jsonl;

fn rlkd(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlkd")).args(args).current_dir(dir).output().unwrap()
}

fn small_config(method: &str) -> String {
    format!(
        r#"{{"benchmark": {{"synthetic": {{"n_train": 400, "n_dev": 100, "n_test": 100,
            "num_classes": 2, "num_regions": 4, "label_noise": 0.0}}}},
            "teachers": {{"epochs": 2}}, "method": "{method}",
            "hyper": {{"epochs": 1, "pretrain_epochs": 1, "gamma": 0.5}}}}"#
    )
}

#[test]
fn gen_data_writes_three_splits() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("spec.json"),
        r#"{"seed": 3, "n_train": 50, "n_dev": 20, "n_test": 30, "num_classes": 2, "num_regions": 4, "label_noise": 0.1}"#,
    )
    .unwrap();
    let out = rlkd(&["gen-data", "--spec", "spec.json", "--out", "data"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sizes: Vec<usize> = ["train", "dev", "test"]
        .iter()
        .map(|s| load_jsonl(dir.path().join(format!("data/{s}.jsonl"))).unwrap().len())
        .collect();
    assert_eq!(sizes, vec![50, 20, 30]);
}

#[test]
fn run_uses_seed_variable_and_feeds_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("rl.json"), small_config("rlkd-r3")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_rlkd"))
        .args(["run", "--config", "rl.json", "--out", "out"])
        .env("SEED", "7")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = MetricsReport::load(&dir.path().join("out/report.json")).unwrap();
    assert_eq!(report.runs.len(), 1);
    assert_eq!(report.runs[0].seed, 7);
    assert!(report.runs[0].selection.is_some());
    for f in ["student.json", "policy.json", "trace.json"] {
        assert!(dir.path().join("out/seed-7").join(f).exists(), "{f}");
    }

    let out = rlkd(&["plot-data", "--trace", "out/seed-7/trace.json", "--out", "plots"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["epochs.csv", "selection.csv", "batch_loss.csv", "rewards.csv"] {
        assert!(dir.path().join("plots").join(f).exists(), "{f}");
    }
    let epochs = std::fs::read_to_string(dir.path().join("plots/epochs.csv")).unwrap();
    assert_eq!(epochs.lines().count(), 1 + 1);
}

#[test]
fn r3_without_gamma_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config("rlkd-r3").replace(r#", "gamma": 0.5"#, "");
    std::fs::write(dir.path().join("c.json"), config).unwrap();
    let out = rlkd(&["run", "--config", "c.json", "--out", "out"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma"));
}

#[test]
fn compare_reports_and_rejects_mixed_benchmarks() {
    let dir = tempfile::tempdir().unwrap();
    for m in ["vkd-uniform", "vkd-rand-single"] {
        std::fs::write(dir.path().join(format!("{m}.json")), small_config(m)).unwrap();
        let out = rlkd(&["run", "--config", &format!("{m}.json"), "--out", m], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let out = rlkd(
        &["compare", "--reports", "vkd-uniform/report.json", "vkd-rand-single/report.json", "--out", "cmp"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("cmp/comparison.txt")).unwrap();
    assert!(text.contains("vkd-uniform") && text.contains("vkd-rand-single"));
    // one seed each: no p-value
    assert!(text.contains("n/a"));

    let other = small_config("ft").replace(r#""n_train": 400"#, r#""n_train": 300"#);
    std::fs::write(dir.path().join("ft.json"), other).unwrap();
    assert!(rlkd(&["run", "--config", "ft.json", "--out", "ft"], dir.path()).status.success());
    let out = rlkd(
        &["compare", "--reports", "vkd-uniform/report.json", "ft/report.json", "--out", "cmp2"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("incompatible"));
}

#[test]
fn missing_trace_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = rlkd(&["plot-data", "--trace", "nope.json", "--out", "plots"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().unwrap().to_str().unwrap().starts_with("quadrant-data") {
            continue;
        }
        ExperimentConfig::load(&path).unwrap();
        n += 1;
    }
    assert!(n >= 4);
}
