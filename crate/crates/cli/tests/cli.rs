use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "seed": 3,
  "backbone": {"stage_dims": [12, 12], "stage_depths": [1, 1], "heads": [2, 2], "image_size": 16},
  "pretrain": {"images": 64, "min_accuracy": 0.0, "train": {"epochs": 1, "batch_size": 16}},
  "finetune": {"volumes": 4, "train_volumes": 3, "dims": [8, 16, 16], "classes": 3,
               "train": {"epochs": 2, "batch_size": 2}}
}"#;

fn medtune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medtune"))
        .args(args)
        .env("MEDTUNE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.json");
    std::fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

fn error_line(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let last = text.lines().last().expect("stderr has a reason line");
    serde_json::from_str(last).expect("reason line is JSON")
}

fn jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn param_plan_fft_branch_on_swin() {
    let o = medtune(&[
        "param-plan",
        "--host",
        "swin-t",
        "--alpha",
        "4",
        "--branches",
        "conv3,conv5,fft",
        "--fft-bias",
        "off",
        "--json",
    ]);
    assert!(o.status.success());
    let plan: Value = serde_json::from_slice(&o.stdout).unwrap();
    let fft = plan["components"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["component"] == "fft")
        .unwrap();
    assert_eq!(fft["count"], 2208);
}

#[test]
fn param_plan_custom_table() {
    let o = medtune(&[
        "param-plan",
        "--host",
        "custom",
        "--dims",
        "8",
        "--depths",
        "1",
        "--alpha",
        "2",
    ]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("inserted"), "{text}");
    assert!(
        text.lines().any(|l| l.starts_with("inserted") && l.contains(" 288 ")),
        "{text}"
    );
}

#[test]
fn selftest_and_grad_check_pass() {
    let o = medtune(&["selftest"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let o = medtune(&["grad-check", "--json"]);
    assert!(o.status.success());
    let lines: Vec<Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.iter().any(|l| l["name"] == "med_adapter_forward"));
    assert!(lines.iter().all(|l| l["passed"] == true));
}

#[test]
fn config_errors_exit_2() {
    let o = medtune(&["--set", "finetune.train.learning_rate=1", "selftest"]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_line(&o);
    assert_eq!(e["kind"], "config");
    assert!(e["reason"].as_str().unwrap().contains("learning_rate"));

    let o = medtune(&["param-plan", "--fft-bias", "maybe"]);
    assert_eq!(o.status.code(), Some(2));
    let o = medtune(&["finetune", "--mode", "everything"]);
    assert_eq!(o.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"seeed": 1}"#).unwrap();
    let o = medtune(&["--config", p.to_str().unwrap(), "selftest"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn io_errors_exit_4() {
    let o = medtune(&["--config", "/nonexistent/medtune.json", "pretrain"]);
    assert_eq!(o.status.code(), Some(4));
    let e = error_line(&o);
    assert_eq!(e["code"], 4);
    assert!(e["reason"].as_str().unwrap().contains("/nonexistent/medtune.json"));
}

#[test]
fn training_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = medtune(&[
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--set",
        "pretrain.min_accuracy=1",
        "pretrain",
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_line(&o)["kind"], "numerical");
    assert!(!out.join("backbone.mtck").exists());
}

#[test]
fn finetune_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = medtune(&[
        "--config",
        &cfg,
        "--out",
        out_s,
        "finetune",
        "--mode",
        "med-tuning",
        "--alpha",
        "6",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "resolved_config.json",
        "backbone.mtck",
        "model.mtck",
        "metrics.jsonl",
        "params.json",
        "finetune.log",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let leftovers: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".partial"))
        .collect();
    assert!(leftovers.is_empty());

    let resolved: Value = serde_json::from_slice(&std::fs::read(out.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["finetune"]["mode"], "med_tuning");
    assert_eq!(resolved["adapter"]["alpha"], 6);

    let o = medtune(&["--out", out_s, "eval"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval = jsonl(&out.join("eval_metrics.jsonl"));
    assert_eq!(eval.len(), 1);
    let tuned = eval[0]["tuned"].as_f64().unwrap();
    let full = eval[0]["full_tuned"].as_f64().unwrap();
    assert!(tuned < 0.3 * full, "{tuned} of {full}");

    let train = jsonl(&out.join("metrics.jsonl"));
    assert_eq!(train.last().unwrap()["dice"], eval[0]["dice"]);
    assert_eq!(train.iter().filter(|l| l["phase"] == "train").count(), 2);
}

#[test]
fn same_seed_same_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = medtune(&[
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "11",
            "finetune",
            "--inter",
            "add",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in [
        "backbone.mtck",
        "model.mtck",
        "metrics.jsonl",
        "pretrain_metrics.jsonl",
        "resolved_config.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn eval_rejects_truncated_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    assert!(
        medtune(&["--config", &cfg, "--out", out_s, "finetune", "--mode", "head"])
            .status
            .success()
    );
    let ck = out.join("model.mtck");
    let bytes = std::fs::read(&ck).unwrap();
    std::fs::write(&ck, &bytes[..bytes.len() / 2]).unwrap();
    let o = medtune(&["--out", out_s, "eval"]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_line(&o)["kind"], "io");
}
