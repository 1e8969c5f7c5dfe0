use std::path::Path;
use std::process::{Command, Output};

use timellm::backbone::Backbone;
use timellm::model::{PromptSpec, TimeLlmModel};
use timellm_cli::config::Overrides;
use timellm_cli::report::{read_json, REPORT_FILE};
use timellm_cli::{ForecastReport, RunConfig};

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timellm")).args(args).current_dir(cwd).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const QUICK: [&str; 10] = [
    "--epochs", "1", "--batch-size", "8", "--set", "train_stride=151", "--set", "val_stride=151", "--set",
    "eval_stride=97",
];

fn synth(dir: &Path) {
    let o = bin(&["synth", "--out", "data", "--steps", "1200", "--channels", "2", "--seed", "4"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn train_then_evaluate_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let mut args = vec!["train", "--manifest", "data/manifest.json", "--dataset", "synthetic", "--out", "run"];
    args.extend(QUICK);
    let o = bin(&args, tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    args[0] = "evaluate";
    let o = bin(&args, tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(metrics[0]["horizon"], 24);
    let report: ForecastReport = read_json(&tmp.path().join("run").join(REPORT_FILE)).unwrap();
    assert_eq!(report.eval_dataset, "synthetic");
    assert!(report.metrics[0].mse.is_finite());
    assert!(tmp.path().join("run/predictions.csv").exists());
    assert!(tmp.path().join("run/timing.json").exists());

    let o = bin(&["metrics", "run/predictions.csv"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rescored: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let m = &report.metrics[0];
    assert_eq!(rescored["count"], m.count);
    assert!((rescored["mse"].as_f64().unwrap() - m.mse).abs() <= 1e-12 * m.mse.max(1.0));
    assert!((rescored["mae"].as_f64().unwrap() - m.mae).abs() <= 1e-12 * m.mae.max(1.0));
}

#[test]
fn unknown_variant_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(&["ablate", "Z.9", "--manifest", "nowhere.json"], tmp.path());
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("Z.9") && err.contains("B.1, B.2, C.1, C.2, C.3"), "{err}");
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&bin(&["train", "--horizon", "many"], tmp.path())), 2);
    assert_eq!(code(&bin(&["train", "--set", "no_such_key=1"], tmp.path())), 2);
    assert_eq!(code(&bin(&["frobnicate"], tmp.path())), 2);
}

#[test]
fn malformed_csv_is_a_data_error_naming_the_row() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut csv = String::from("date,a\n");
    for i in 0..300 {
        csv += &format!("{i},{}\n", if i == 41 { "oops".to_string() } else { i.to_string() });
    }
    std::fs::write(dir.join("bad.csv"), csv).unwrap();
    std::fs::write(dir.join("manifest.json"), r#"{"datasets": {"bad": {"path": "bad.csv", "context": "x"}}}"#).unwrap();
    let o = bin(&["train", "--manifest", "manifest.json", "--dataset", "bad"], dir);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("row"), "{}", stderr(&o));
}

#[test]
fn flags_override_file_which_overrides_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("run.json");
    std::fs::write(&path, r#"{"epochs": 7, "lr": 0.01, "manifest": "data/m.json"}"#).unwrap();
    let mut flags = Overrides::new();
    flags.insert("lr".into(), 0.5.into());
    let cfg = RunConfig::resolve(Some(&path), &flags).unwrap();
    assert_eq!(cfg.epochs, 7);
    assert_eq!(cfg.lr, 0.5);
    assert_eq!(cfg.batch_size, RunConfig::default().batch_size);
    assert_eq!(cfg.manifest.unwrap(), tmp.path().join("data/m.json"));
}

#[test]
fn stats_ablation_keeps_context_and_instruction() {
    let mut flags = Overrides::new();
    flags.insert("ablation".into(), "C.3".into());
    let cfg = RunConfig::resolve(None, &flags).unwrap();
    assert!(cfg.no_stats && !cfg.no_prompt && !cfg.no_dataset_ctx && !cfg.no_instruction);
    let backbone = Backbone::init_random(cfg.backbone_config(), 1).unwrap();
    let model = TimeLlmModel::new(cfg.model_config(), backbone, PromptSpec::new("hourly load"), 1).unwrap();
    let window: Vec<f64> = (0..96).map(|t| t as f64 * 0.37).collect();
    let prompt = model.build_prompt(&window).unwrap().unwrap().rendered;
    assert!(prompt.contains("hourly load"), "{prompt}");
    assert!(prompt.contains("next 24 steps") && prompt.contains("previous 96 steps"), "{prompt}");
    assert!(!prompt.contains("min value") && !prompt.contains("trend"), "{prompt}");
}

#[test]
fn no_prompt_variant_is_recorded_in_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let mut args = vec!["ablate", "B.2", "--manifest", "data/manifest.json", "--dataset", "synthetic", "--out", "b2"];
    args.extend(QUICK);
    let o = bin(&args, tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: ForecastReport = read_json(&tmp.path().join("b2").join(REPORT_FILE)).unwrap();
    assert_eq!(report.label.as_deref(), Some("B.2"));
    assert!(report.config.no_prompt);
    assert!(!report.config.no_reprogram);
}
