use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use seqdet::config::RunConfig;
use seqdet::decoder::DecoderConfig;
use seqdet::scenegen::{write_scene_file, Scene};
use seqdet::training::{toy_model, toy_scene_config};
use serde_json::Value;
use tempfile::TempDir;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Run {
    fn json(&self) -> Value {
        serde_json::from_str(&self.stdout).unwrap_or_else(|e| panic!("stdout is not json ({e}):\n{}\n{}", self.stdout, self.stderr))
    }
}

fn seqdet(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Run {
    seqdet_env(args, None)
}

fn seqdet_env(args: &[&dyn AsRef<std::ffi::OsStr>], seed: Option<&str>) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_seqdet"));
    cmd.args(args.iter().map(|a| a.as_ref()));
    match seed {
        Some(s) => cmd.env("P2S_SEED", s),
        None => cmd.env_remove("P2S_SEED"),
    };
    let out = cmd.output().expect("binary runs");
    Run {
        code: out.status.code().expect("exit code"),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn toy_config() -> RunConfig {
    let scenegen = toy_scene_config();
    let mut cfg = RunConfig {
        model: toy_model(DecoderConfig {
            classes: scenegen.classes.len(),
            ..DecoderConfig::default()
        }),
        scenegen,
        ..RunConfig::default()
    };
    cfg.train.epochs = 3;
    cfg.train.batch_size = 2;
    cfg.train.checkpoint_every = 2;
    cfg.eval.score_threshold = 0.05;
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

/// A temp dir holding `config.json` and a 4-scene dataset in `data/`.
fn fixture(cfg: &RunConfig) -> (TempDir, PathBuf, PathBuf) {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "config.json", cfg);
    let data = dir.path().join("data");
    let r = seqdet(&[&"gen-data", &"--config", &config, &"--out", &data, &"--count", &"4"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    (dir, config, data)
}

fn train(config: &Path, data: &Path, out: &Path, resume: bool) -> Run {
    let mut args: Vec<&dyn AsRef<std::ffi::OsStr>> = vec![&"train", &"--config", &config, &"--data", &data, &"--out", &out];
    if resume {
        args.push(&"--resume");
    }
    seqdet(&args)
}

fn checkpoint_names(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("checkpoint_"))
        .collect();
    names.sort();
    names
}

#[test]
fn gen_data_is_deterministic_and_seedable() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "c.json", &toy_config());
    let gen = |name: &str, count: &str, seed: Option<&str>| {
        let out = dir.path().join(name);
        let r = seqdet_env(&[&"gen-data", &"--config", &config, &"--out", &out, &"--count", &count], seed);
        assert_eq!(r.code, 0, "{}", r.stderr);
        r.json()
    };
    let a = gen("a", "3", None);
    let b = gen("b", "3", None);
    assert_eq!(a["scene_count"], 3);
    assert_eq!(a["checksums"], b["checksums"]);
    assert_eq!(a["checksums"].as_object().unwrap().len(), 3);
    let c = gen("c", "3", Some("99"));
    assert_eq!(c["seed"], 99);
    assert_ne!(a["checksums"], c["checksums"]);

    let empty = gen("empty", "0", None);
    assert_eq!(empty["scene_count"], 0);
    let index: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("empty/index.json")).unwrap()).unwrap();
    assert_eq!(index["scene_count"], 0);
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"epochz": 1}}"#).unwrap();
    let out = dir.path().join("out");
    let r = seqdet(&[&"gen-data", &"--config", &bad, &"--out", &out, &"--count", &"1"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("epochz"), "{}", r.stderr);

    let good = write_config(dir.path(), "good.json", &toy_config());
    let r = seqdet_env(&[&"gen-data", &"--config", &good, &"--out", &out, &"--count", &"1"], Some("abc"));
    assert_eq!(r.code, 2);

    assert_eq!(seqdet(&[&"no-such-command"]).code, 2);
    assert_eq!(seqdet(&[&"gen-data", &"--config", &good]).code, 2);

    let missing = dir.path().join("missing.json");
    assert_eq!(seqdet(&[&"gen-data", &"--config", &missing, &"--out", &out, &"--count", &"1"]).code, 3);
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let mut cfg = toy_config();
    cfg.train.epochs = 0;
    let (dir, config, data) = fixture(&cfg);
    let run = dir.path().join("run");
    let r = train(&config, &data, &run, false);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.json()["steps"], 0);
    assert_eq!(checkpoint_names(&run), ["checkpoint_0000000.p2sq", "checkpoint_0000000.p2sq.adam"]);
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap(), "");
}

#[test]
fn training_twice_into_one_directory_is_refused() {
    let mut cfg = toy_config();
    cfg.train.epochs = 0;
    let (dir, config, data) = fixture(&cfg);
    let run = dir.path().join("run");
    assert_eq!(train(&config, &data, &run, false).code, 0);
    assert_eq!(train(&config, &data, &run, false).code, 2);
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let cfg = toy_config();
    let (dir, config, data) = fixture(&cfg);
    let full = dir.path().join("full");
    let r = train(&config, &data, &full, false);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let steps = r.json()["steps"].as_u64().unwrap();
    assert_eq!(steps, 6);

    // Interrupt after step 2: keep its checkpoint and a metrics log that ran past it.
    let part = dir.path().join("part");
    fs::create_dir(&part).unwrap();
    for name in ["checkpoint_0000000.p2sq", "checkpoint_0000002.p2sq", "checkpoint_0000002.p2sq.adam", "config.json"] {
        fs::copy(full.join(name), part.join(name)).unwrap();
    }
    let lines: Vec<String> = fs::read_to_string(full.join("metrics.jsonl")).unwrap().lines().map(String::from).collect();
    fs::write(part.join("metrics.jsonl"), lines[..3].join("\n") + "\n").unwrap();

    let r = train(&config, &data, &part, true);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.json()["start_step"], 2);
    assert_eq!(r.json()["steps"], steps);
    assert_eq!(fs::read(full.join("metrics.jsonl")).unwrap(), fs::read(part.join("metrics.jsonl")).unwrap());
    assert_eq!(
        fs::read(full.join("checkpoint_0000006.p2sq")).unwrap(),
        fs::read(part.join("checkpoint_0000006.p2sq")).unwrap()
    );
}

#[test]
fn diverging_training_exits_4() {
    let mut cfg = toy_config();
    cfg.train.lr = 1e300;
    let (dir, config, data) = fixture(&cfg);
    let r = train(&config, &data, &dir.path().join("run"), false);
    assert_eq!(r.code, 4, "{}", r.stderr);
}

#[test]
fn eval_infer_and_compatibility() {
    let cfg = toy_config();
    let (dir, config, data) = fixture(&cfg);
    let run = dir.path().join("run");
    assert_eq!(train(&config, &data, &run, false).code, 0);
    let ckpt = run.join("checkpoint_0000006.p2sq");

    let r = seqdet(&[&"eval", &"--checkpoint", &ckpt, &"--data", &data]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let report = r.json();
    let schema: Value = serde_json::from_str(seqdet::eval::EVAL_REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    assert!(validator.is_valid(&report), "{report}");
    assert_eq!(report["scene_count"], 4);

    let scene = data.join("scene_00000.p2sc");
    let a = seqdet(&[&"infer", &"--checkpoint", &ckpt, &"--scene", &scene]);
    let b = seqdet(&[&"infer", &"--checkpoint", &ckpt, &"--scene", &scene]);
    assert_eq!(a.code, 0, "{}", a.stderr);
    assert_eq!(a.stdout, b.stdout);
    for det in a.json().as_array().unwrap() {
        assert!(["vehicle", "pedestrian"].contains(&det["class"].as_str().unwrap()));
        assert!(det["score"].as_f64().unwrap() >= cfg.eval.score_threshold);
    }

    let empty = dir.path().join("empty.p2sc");
    write_scene_file(&empty, &Scene { points: vec![], boxes: vec![] }).unwrap();
    let r = seqdet(&[&"infer", &"--checkpoint", &ckpt, &"--scene", &empty]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.json().is_array());

    let mut wide = cfg.clone();
    wide.model.grid.channels = 8;
    let wide_path = write_config(dir.path(), "wide.json", &wide);
    let r = seqdet(&[&"eval", &"--checkpoint", &ckpt, &"--config", &wide_path, &"--data", &data]);
    assert_eq!(r.code, 5, "{}", r.stderr);

    let truncated = dir.path().join("truncated.p2sq");
    let bytes = fs::read(&ckpt).unwrap();
    fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    let r = seqdet(&[&"eval", &"--checkpoint", &truncated, &"--config", &config, &"--data", &data]);
    assert_eq!(r.code, 3, "{}", r.stderr);

    let scene_file = data.join("scene_00001.p2sc");
    let mut bytes = fs::read(&scene_file).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&scene_file, bytes).unwrap();
    let r = seqdet(&[&"eval", &"--checkpoint", &ckpt, &"--data", &data]);
    assert_eq!(r.code, 3, "{}", r.stderr);
    assert!(r.stderr.contains("scene_00001"), "{}", r.stderr);
}

#[test]
fn check_grad_passes_and_catches_a_fault() {
    let r = seqdet(&[&"check-grad"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let report = r.json();
    assert_eq!(report["passed"], true);
    assert!(report["max_error"].as_f64().unwrap() < 1e-4);
    let groups: Vec<&String> = report["groups"].as_object().unwrap().keys().collect();
    for g in ["backbone", "decoder"] {
        assert!(groups.iter().any(|k| k.starts_with(g)), "{groups:?}");
    }

    let r = seqdet(&[&"check-grad", &"--inject-fault"]);
    assert_eq!(r.code, 6, "{}", r.stderr);
    assert_eq!(r.json()["passed"], false);
}

#[test]
fn ablations_produce_one_finite_row_per_variant() {
    let mut cfg = toy_config();
    cfg.train.epochs = 1;
    let (_dir, config, data) = fixture(&cfg);

    let r = seqdet(&[&"ablate-metric", &"--config", &config, &"--data", &data]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let out = r.json();
    let names: Vec<&str> = out["rows"].as_array().unwrap().iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["word_distance", "corner_distance", "iou3d"]);

    let r = seqdet(&[&"ablate-order", &"--config", &config, &"--data", &data, &"--val", &data]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let out = r.json();
    assert_eq!(out["split"], "val");
    let rows = out["rows"].as_array().unwrap();
    let expected: Vec<String> = seqdet::words::WordOrder::ablation_set().iter().map(|o| o.to_string()).collect();
    let got: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(got, expected);
    for row in rows {
        assert!(row["final_loss"].as_f64().unwrap().is_finite());
        assert_eq!(row["steps"], 2);
    }
}
