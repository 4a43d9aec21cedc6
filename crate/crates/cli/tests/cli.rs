use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn wordcon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wordcon"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn wordcon")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(path: &Path, value: serde_json::Value) -> PathBuf {
    std::fs::write(path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path.to_path_buf()
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY_MODEL: &str = r#"{"hidden_dim": 16, "heads": 2}"#;

fn synth(dir: &Path) -> PathBuf {
    let cfg = write(
        &dir.join("synth.json"),
        serde_json::json!({ "num_samples": 12, "test_fraction": 0.25 }),
    );
    let data = dir.join("data");
    assert_exit(
        &wordcon(&[
            "synth",
            "--config",
            s(&cfg),
            "--out",
            s(&data),
            "--seed",
            "4",
        ]),
        0,
    );
    data
}

fn train_config(dir: &Path, data: &Path, name: &str, extra: serde_json::Value) -> PathBuf {
    let mut cfg = serde_json::json!({
        "manifest": data.join("manifest.jsonl"),
        "out_dir": dir.join(name),
        "model": serde_json::from_str::<serde_json::Value>(TINY_MODEL).unwrap(),
        "batch_size": 2,
        "steps": 3,
        "val_samples": 2,
        "val_draws": 1,
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    write(&dir.join(format!("{name}.json")), cfg)
}

#[test]
fn synth_is_seeded_and_writes_masks_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let manifest = std::fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 12);
    assert!(data.join("config.json").exists());
    let first: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    let id = first["sample_id"].as_str().unwrap();
    assert!(data.join("masks").join(format!("{id}.word0.png")).exists());

    let again = dir.path().join("again");
    let cfg = dir.path().join("synth.json");
    assert_exit(
        &wordcon(&[
            "synth",
            "--config",
            s(&cfg),
            "--out",
            s(&again),
            "--seed",
            "4",
        ]),
        0,
    );
    assert_eq!(
        manifest.replace(s(&data), ""),
        std::fs::read_to_string(again.join("manifest.jsonl"))
            .unwrap()
            .replace(s(&again), "")
    );
}

#[test]
fn train_eval_merge_probe_and_sample() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = synth(root);
    let cfg = train_config(root, &data, "run", serde_json::json!({}));
    assert_exit(&wordcon(&["train", "--config", s(&cfg)]), 0);
    let run = root.join("run");
    for f in [
        "adapter.wcon",
        "state.ckpt",
        "metrics.jsonl",
        "train_config.json",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    for key in [
        "step",
        "loss_total",
        "loss_mask",
        "loss_attn",
        "wallclock_s",
    ] {
        assert!(row.get(key).is_some(), "metrics row lacks {key}");
    }

    let adapter = run.join("adapter.wcon");
    let eval_dir = root.join("eval");
    let bench = write(
        &root.join("bench.json"),
        serde_json::json!({ "sampler": { "steps": 2 } }),
    );
    assert_exit(
        &wordcon(&[
            "eval",
            "--adapter",
            s(&adapter),
            "--manifest",
            s(&data.join("manifest.jsonl")),
            "--config",
            s(&bench),
            "--out",
            s(&eval_dir),
        ]),
        0,
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("report.json")).unwrap())
            .unwrap();
    for key in [
        "type_acc",
        "word_acc",
        "total_acc",
        "ocr_precision",
        "ocr_recall",
        "mean_attention_iou",
        "config_hash",
        "run_id",
    ] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    assert!(eval_dir.join("eval_config.json").exists());

    let merged = root.join("merged.wcon");
    assert_exit(
        &wordcon(&[
            "merge-adapter",
            "--adapter",
            s(&adapter),
            "--out",
            s(&merged),
        ]),
        0,
    );
    assert!(merged.exists() && root.join("merged.json").exists());

    let manifest = std::fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    let id = first["sample_id"].as_str().unwrap();
    let probe = root.join("probe");
    let out = wordcon(&[
        "attn-probe",
        "--checkpoint",
        s(&adapter),
        "--sample",
        id,
        "--out",
        s(&probe),
    ]);
    assert_exit(&out, 0);
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(probe.join(format!("{id}.attn.json"))).unwrap(),
    )
    .unwrap();
    let words = summary["words"].as_array().unwrap();
    assert_eq!(words.len(), first["words"].as_array().unwrap().len());
    for w in words {
        let iou = w["iou"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&iou));
        assert!(probe.join(w["png"].as_str().unwrap()).exists());
    }

    let png = root.join("gen.png");
    assert_exit(
        &wordcon(&[
            "sample",
            "--checkpoint",
            s(&run.join("state.ckpt")),
            "--words",
            "GO:bold",
            "UP",
            "--steps",
            "2",
            "--out",
            s(&png),
        ]),
        0,
    );
    assert!(png.exists() && root.join("gen.json").exists());
}

#[test]
fn resume_continues_to_the_same_adapter() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = synth(root);
    let full = train_config(root, &data, "full", serde_json::json!({ "steps": 4 }));
    assert_exit(&wordcon(&["train", "--config", s(&full)]), 0);
    let part = train_config(
        root,
        &data,
        "part",
        serde_json::json!({ "steps": 4, "checkpoint_every": 2 }),
    );
    assert_exit(&wordcon(&["train", "--config", s(&part)]), 0);
    let ckpt = root.join("part/checkpoints/step_000002.ckpt");
    let resumed = root.join("resumed");
    assert_exit(
        &wordcon(&[
            "train",
            "--config",
            s(&part),
            "--resume",
            s(&ckpt),
            "--out",
            s(&resumed),
        ]),
        0,
    );
    assert_eq!(
        std::fs::read(root.join("full/adapter.wcon")).unwrap(),
        std::fs::read(resumed.join("adapter.wcon")).unwrap()
    );
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let missing = root.join("nope.json");
    assert_exit(&wordcon(&["train", "--config", s(&missing)]), 1);
    let bad = write(&root.join("bad.json"), serde_json::json!({ "steps": 0 }));
    assert_exit(&wordcon(&["train", "--config", s(&bad)]), 2);
    assert_exit(&wordcon(&["train"]), 2);

    let data = synth(root);
    let cfg = train_config(root, &data, "run", serde_json::json!({ "steps": 1 }));
    assert_exit(&wordcon(&["train", "--config", s(&cfg)]), 0);
    let other = root.join("other_base.wcon");
    let other_cfg = train_config(
        root,
        &data,
        "base",
        serde_json::json!({ "stage": "base", "loss_mode": "vanilla", "steps": 1,
                            "model": { "hidden_dim": 8, "heads": 2 } }),
    );
    assert_exit(&wordcon(&["train", "--config", s(&other_cfg)]), 0);
    std::fs::copy(root.join("base/base.wcon"), &other).unwrap();
    let eval = wordcon(&[
        "eval",
        "--adapter",
        s(&root.join("run/adapter.wcon")),
        "--manifest",
        s(&data.join("manifest.jsonl")),
        "--base",
        s(&other),
        "--out",
        s(&root.join("eval")),
    ]);
    assert_exit(&eval, 3);

    let blowup = train_config(
        root,
        &data,
        "blowup",
        serde_json::json!({ "learning_rate": 1e300, "steps": 5 }),
    );
    let out = wordcon(&["train", "--config", s(&blowup)]);
    assert_exit(&out, 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn ablate_prints_one_row_per_arm() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write(
        &root.join("ablate.json"),
        serde_json::json!({
            "dataset": { "num_samples": 12, "test_fraction": 0.25 },
            "out_dir": "ablation",
            "pretrain": { "steps": 2, "batch_size": 2 },
            "train": {
                "model": serde_json::from_str::<serde_json::Value>(TINY_MODEL).unwrap(),
                "batch_size": 2, "steps": 2, "val_samples": 2, "val_draws": 1
            },
            "benchmark": { "sampler": { "steps": 2 } }
        }),
    );
    let out = wordcon(&["ablate", "--config", s(&cfg), "--seed", "3"]);
    assert_exit(&out, 0);
    let table = String::from_utf8_lossy(&out.stdout);
    assert_eq!(table.lines().count(), 4, "{table}");
    let ablation = root.join("ablation");
    for f in ["ablation.json", "ablation.txt", "ablation_config.json"] {
        assert!(ablation.join(f).exists(), "missing {f}");
    }
    let txt = std::fs::read_to_string(ablation.join("ablation.txt")).unwrap();
    assert!(txt.contains("vanilla") && txt.contains("masked+attn"));
}
