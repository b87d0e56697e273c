use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use toml::{Table, Value};

fn mepoi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mepoi")).args(args).env_remove("MEPOI_SEED").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn set(t: &mut Table, key: &str, v: impl Into<Value>) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap();
    let mut cur = t;
    for p in parts {
        cur = cur.get_mut(p).unwrap().as_table_mut().unwrap();
    }
    assert!(cur.contains_key(last), "{key}");
    cur.insert(last.into(), v.into());
}

/// A tiny run writing into `dir`.
fn tiny_config(dir: &Path) -> PathBuf {
    let out = mepoi(&["default-config"]);
    assert!(out.status.success());
    let mut t: Table = stdout(&out).parse().unwrap();
    for (k, v) in [
        ("world.poi_count", 60),
        ("world.device_count", 25),
        ("world.duration_days", 7),
        ("preprocess.anchor_threshold", 10),
        ("model.encoder.scales", 2),
        ("model.encoder.time_dim", 4),
        ("model.transformer.layers", 1),
        ("model.transformer.heads", 2),
        ("model.transformer.ffn_dim", 16),
        ("model.transformer.window", 8),
        ("model.head_hidden", 16),
        ("pretrain.epochs", 1),
        ("pretrain.batch_windows", 4),
        ("pretrain.anchor_samples", 4),
        ("pretrain.sparse_samples", 8),
        ("pretrain.text_samples", 8),
        ("probe.seeds", 1),
        ("probe.head.hidden", 8),
        ("probe.head.max_epochs", 3),
    ] {
        set(&mut t, k, v);
    }
    set(&mut t, "text.dim", 16);
    set(&mut t, "probe.tasks", Value::Array(vec!["intent".into(), "price".into()]));
    write(dir, &t)
}

fn write(dir: &Path, t: &Table) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, toml::to_string(t).unwrap()).unwrap();
    path
}

fn stage(cfg: &Path, args: &[&str]) -> Output {
    let mut all = vec!["--config", cfg.to_str().unwrap()];
    all.extend_from_slice(args);
    mepoi(&all)
}

#[test]
fn help_lists_every_key_with_default() {
    let out = mepoi(&["--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for line in ["seed = 7", "world.poi_count = 1000", "pretrain.lambda_text = 1.0", "probe.head.learning_rate = 0.00001", "paths.world = \"world.jsonl\""] {
        assert!(text.contains(line), "missing `{line}` in help");
    }
}

#[test]
fn missing_key_names_key_and_type() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut t: Table = std::fs::read_to_string(&cfg).unwrap().parse().unwrap();
    t["pretrain"].as_table_mut().unwrap().remove("temperature");
    let cfg = write(dir.path(), &t);
    let out = stage(&cfg, &["generate"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("missing config key `pretrain.temperature` (expected float)"), "{}", stderr(&out));
}

#[test]
fn type_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut t: Table = std::fs::read_to_string(&cfg).unwrap().parse().unwrap();
    set(&mut t, "world.device_count", "many");
    let cfg = write(dir.path(), &t);
    let out = stage(&cfg, &["generate"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("`world.device_count` expects integer, found string"), "{}", stderr(&out));
}

#[test]
fn stages_out_of_order_name_the_missing_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = stage(&cfg, &["preprocess"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("run `mepoi generate` first"), "{}", stderr(&out));

    assert!(stage(&cfg, &["generate"]).status.success());
    assert!(stage(&cfg, &["preprocess"]).status.success());
    let out = stage(&cfg, &["pretrain"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("run `mepoi precompute` first"), "{}", stderr(&out));
    let out = stage(&cfg, &["finetune"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("run `mepoi export-embeddings` first"), "{}", stderr(&out));
}

#[test]
fn existing_outputs_need_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert!(stage(&cfg, &["generate"]).status.success());
    let out = stage(&cfg, &["generate"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--force"));
    assert!(stage(&cfg, &["--force", "generate"]).status.success());
}

#[test]
fn seed_flag_and_env_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let world = dir.path().join("world.jsonl");
    assert!(stage(&cfg, &["--seed", "3", "generate"]).status.success());
    let by_flag = std::fs::read(&world).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mepoi"))
        .args(["--config", cfg.to_str().unwrap(), "--force", "generate"])
        .env("MEPOI_SEED", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(&world).unwrap(), by_flag);
    assert!(stage(&cfg, &["--force", "--seed", "4", "generate"]).status.success());
    assert_ne!(std::fs::read(&world).unwrap(), by_flag);
}

#[test]
fn full_pipeline_resumes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for s in ["generate", "preprocess", "precompute", "pretrain"] {
        let out = stage(&cfg, &["--deterministic", s]);
        assert!(out.status.success(), "{s}: {}", stderr(&out));
    }
    let out = stage(&cfg, &["pretrain"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("already holds 1 epochs"), "{}", stderr(&out));

    let mut t: Table = std::fs::read_to_string(&cfg).unwrap().parse().unwrap();
    set(&mut t, "pretrain.epochs", 2);
    let cfg = write(dir.path(), &t);
    let out = stage(&cfg, &["pretrain"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("resuming after epoch 1"));

    for s in ["export-embeddings", "export-prompts", "finetune", "report"] {
        let out = stage(&cfg, &[s]);
        assert!(out.status.success(), "{s}: {}", stderr(&out));
    }
    let report = stdout(&stage(&cfg, &["report"]));
    assert!(report.contains("| combined |") && report.contains("Random-embedding control"), "{report}");
    assert_eq!(std::fs::read_dir(dir.path().join("prompts")).unwrap().count(), 60);

    let log = std::fs::read_to_string(dir.path().join("pretrain.log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines.iter().any(|l| l["stage"] == "pretrain" && l.get("step").is_some()));
    assert!(lines.iter().all(|l| l["ts"].is_f64()));
}

#[test]
fn smoke_config_runs_end_to_end_within_ten_minutes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("smoke.toml");
    std::fs::copy(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml"), &cfg).unwrap();
    let start = std::time::Instant::now();
    for s in ["generate", "preprocess", "precompute", "pretrain", "export-embeddings", "finetune"] {
        let out = stage(&cfg, &[s]);
        assert!(out.status.success(), "{s}: {}", stderr(&out));
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 600.0, "{secs:.0}s");
    assert!(dir.path().join("smoke-out/reports/summary.md").exists());
}
