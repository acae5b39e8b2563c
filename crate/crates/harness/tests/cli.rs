mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sbattn_harness::ExperimentConfig;

fn sbattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbattn")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn preset_then_count_costs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.json");
    let (out, csv) = (dir.path().join("costs.json"), dir.path().join("costs.csv"));
    assert!(sbattn(&["preset", "imagenet-paper", "--out", path(&config)]).status.success());
    let o = sbattn(&["count-costs", "--config", path(&config), "--out", path(&out), "--csv", path(&csv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let params = report["params"].as_u64().unwrap();
    let expect = sbattn::build_mobilenet_v2(&ExperimentConfig::load(&config).unwrap().model_config().unwrap())
        .unwrap()
        .param_count() as u64;
    assert_eq!(params, expect);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "name,type,params,multiplies,adds");
    assert!(text.lines().count() > 50);
}

#[test]
fn grad_check_reports_pass_and_rejects_bad_arguments() {
    for mechanism in ["static", "sb"] {
        let o = sbattn(&["grad-check", "--mechanism", mechanism, "--gate", "sigmoid", "--trials", "2"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("ok"));
    }
    assert!(!sbattn(&["grad-check", "--mechanism", "cbam"]).status.success());
    assert_eq!(sbattn(&["grad-check", "--mechanism", "se", "--trials", "0"]).status.code(), Some(2));
}

#[test]
fn saturation_sweep_writes_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let o = sbattn(&["saturation-sweep", "--mechanism", "se", "--offsets", "-20,0,20", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "offset,trunk_grad_norm,branch_grad_norm,input_grad_norm");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("-20"));
    assert_eq!(
        sbattn(&["saturation-sweep", "--mechanism", "dyconv", "--offsets", "0", "--out", path(&out)]).status.code(),
        Some(2)
    );
}

#[test]
fn train_on_a_small_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir(&data).unwrap();
    common::write_fake_cifar(&data, 20);
    let config = dir.path().join("cfg.json");
    fs::write(
        &config,
        r#"{"model": {"stages": [{"expansion": 2, "channels": 8, "repeats": 1, "stride": 2}],
                      "stem_channels": 8, "head_channels": 16, "input_resolution": 32,
                      "attention": {"mechanism": "sb"}, "placement": ["C1", "C3"]},
            "train": {"epochs": 2, "batch_size": 16, "subset_size": 50, "test_subset": 20}}"#,
    )
    .unwrap();
    let (out, csv) = (dir.path().join("run.json"), dir.path().join("run.csv"));
    let o =
        sbattn(&["train", "--config", path(&config), "--data", path(&data), "--out", path(&out), "--csv", path(&csv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(report["train_samples"], 50);
    assert!(report["epochs"][1]["lambda"]["mean"].is_f64());
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "epoch,lr,train_loss,test_acc,lambda_min,lambda_mean,lambda_max");
    assert_eq!(text.lines().count(), 3);

    // The data directory can come from the environment.
    let o = Command::new(env!("CARGO_BIN_EXE_sbattn"))
        .args(["train", "--config", path(&config), "--out", path(&out)])
        .env("CIFAR10_DIR", &data)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.json");
    fs::write(&config, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let o = sbattn(&["count-costs", "--config", path(&config), "--out", path(&dir.path().join("x.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    fs::write(&config, "{}").unwrap();
    let o = sbattn(&[
        "train",
        "--config",
        path(&config),
        "--data",
        path(dir.path()),
        "--out",
        path(&dir.path().join("r.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("data_batch_1.bin"));

    assert_eq!(sbattn(&["preset", "nope", "--out", path(&config)]).status.code(), Some(2));
}
