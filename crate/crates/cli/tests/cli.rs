use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use anyseg::harness::ExperimentConfig;

fn anyseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anyseg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_record(o: &Output) -> serde_json::Value {
    assert!(!o.status.success(), "expected failure, stdout: {}", stdout(o));
    let stderr = String::from_utf8_lossy(&o.stderr);
    let last = stderr.lines().last().expect("error record on stderr");
    let v: serde_json::Value = serde_json::from_str(last).expect("stderr ends with a JSON record");
    assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
    v
}

/// Small config: two epochs on a handful of scenes.
fn write_tiny_config(dir: &Path) {
    let mut cfg = ExperimentConfig::desk();
    cfg.out_dir = "run".into();
    cfg.data.train_samples = 12;
    cfg.data.eval_samples = 4;
    cfg.optimizer.epochs = 2;
    cfg.optimizer.batch_size = 4;
    cfg.save(&dir.join("tiny.toml")).unwrap();
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_tiny_config(dir);
    let c = ["--config", "tiny.toml"];

    let o = anyseg(dir, &[&c[..], &["gen-data"]].concat());
    assert!(o.status.success(), "{o:?}");
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["train"]["samples"], 12);
    assert!(dir.join("data/train.anyseg").exists() && dir.join("data/eval.anyseg").exists());

    let o = anyseg(dir, &[&c[..], &["train-teacher"]].concat());
    assert!(o.status.success(), "{o:?}");
    assert!(dir.join("run/teacher.ckpt").exists());
    assert!(dir.join("run/teacher.metrics.jsonl").exists());
    let saved = ExperimentConfig::load(&dir.join("run/config.toml")).unwrap();
    assert_eq!(saved, ExperimentConfig::load(&dir.join("tiny.toml")).unwrap());

    let o = anyseg(dir, &[&c[..], &["train-student", "--toggles", "sup,mad,umd,cmd"]].concat());
    assert!(o.status.success(), "{o:?}");
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["toggles"], "sup,mad,umd,cmd");

    let o = anyseg(dir, &[&c[..], &["eval"]].concat());
    assert!(o.status.success(), "{o:?}");
    let csv = stdout(&o);
    let lines: Vec<&str> = csv.lines().collect();
    // header, 15 subsets, Mean
    assert_eq!(lines.len(), 17, "{csv}");
    assert!(lines[0].starts_with("subset,miou"));
    assert!(lines[16].starts_with("Mean,"));
    assert_eq!(fs::read_to_string(dir.join("run/eval.csv")).unwrap().trim_end(), csv.trim_end());

    let o = anyseg(dir, &[&c[..], &["ablate", "--toggles", "sup", "--toggles", "sup,mad"]].concat());
    assert!(o.status.success(), "{o:?}");
    let csv = stdout(&o);
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(csv.lines().nth(1).unwrap().starts_with("sup,ok"));
    assert!(csv.lines().nth(2).unwrap().starts_with("sup+mad,ok"));
    assert!(dir.join("run/ablation/ablation.csv").exists());
}

#[test]
fn seed_and_out_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_tiny_config(dir);
    let o = anyseg(dir, &["--config", "tiny.toml", "--seed", "42", "gen-data"]);
    assert!(o.status.success(), "{o:?}");
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["train"]["seed"], 42);
    let o = anyseg(dir, &["--config", "tiny.toml", "--seed", "7", "--out", "other", "train-teacher"]);
    assert!(o.status.success(), "{o:?}");
    let saved = ExperimentConfig::load(&dir.join("other/config.toml")).unwrap();
    assert_eq!(saved.seeds.train, 7);
    assert_eq!(saved.out_dir, Path::new("other"));
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = anyseg(tmp.path(), &["gradcheck", "--trials", "2"]);
    assert!(o.status.success(), "{o:?}");
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["cases"].as_array().unwrap().len(), 24);
}

#[test]
fn failures_emit_error_records() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let v = error_record(&anyseg(dir, &["train-teacher"]));
    assert_eq!(v["kind"], "io");
    assert!(v["message"].as_str().unwrap().contains("gen-data"));

    let o = anyseg(dir, &["train-student", "--toggles", "sup,bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_record(&o)["kind"], "usage");

    fs::write(dir.join("bad.toml"), "out_dir = \"x\"\nunknown_key = 1\n").unwrap();
    assert_eq!(error_record(&anyseg(dir, &["--config", "bad.toml", "gen-data"]))["kind"], "config");

    write_tiny_config(dir);
    let c = ["--config", "tiny.toml"];
    assert!(anyseg(dir, &[&c[..], &["gen-data"]].concat()).status.success());
    assert!(anyseg(dir, &[&c[..], &["train-teacher"]].concat()).status.success());
    assert!(anyseg(dir, &[&c[..], &["train-student", "--toggles", "sup"]].concat()).status.success());

    // a student checkpoint is not frozen and cannot serve as teacher
    let v = error_record(&anyseg(dir, &[&c[..], &["train-student", "--teacher", "run/student.ckpt"]].concat()));
    assert_eq!(v["kind"], "config");

    let ckpt = dir.join("run/teacher.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let at = bytes.len() / 2;
    bytes[at] ^= 0x10;
    fs::write(&ckpt, &bytes).unwrap();
    let v = error_record(&anyseg(dir, &[&c[..], &["eval", "--checkpoint", "run/teacher.ckpt"]].concat()));
    assert_eq!(v["kind"], "checksum");

    let data = dir.join("data/eval.anyseg");
    let bytes = fs::read(&data).unwrap();
    fs::write(&data, &bytes[..bytes.len() - 3]).unwrap();
    let v = error_record(&anyseg(dir, &[&c[..], &["eval"]].concat()));
    assert!(["format", "checksum"].contains(&v["kind"].as_str().unwrap()), "{v}");
}
