//! End-to-end tests of the `comodal` binary: artifact layout, determinism,
//! and the one-line stderr error contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_comodal"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is UTF-8")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is UTF-8")
}

fn write_cfg(dir: &Path, seed: u64) -> PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(
        &path,
        format!(
            r#"{{
  "modalities": [
    {{"name": "a", "channels": 2, "length": 6, "view": {{"noise_sigma": 0.3}}}},
    {{"name": "b", "channels": 2, "length": 6, "view": {{"noise_sigma": 0.3}}}}
  ],
  "mm": {{"d_model": 4, "heads": 1, "cross_depth": 1, "self_depth": 1, "ff_hidden": 4, "positional": true}},
  "task": {{"kind": "classification", "classes": 3}},
  "data": {{"latent_dim": 4, "train": 12, "val": 6, "test": 6}},
  "epochs": 2, "batch_size": 6, "seed": {seed}
}}"#
        ),
    )
    .expect("config written");
    path
}

fn train_into(cfg: &Path, out: &Path) -> Output {
    run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn gradcheck_passes_and_prints_one_line_per_check() {
    let out = run(&["gradcheck"]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let stdout = stdout_of(&out);
    let lines: Vec<&str> = stdout.lines().collect();
    assert!(lines.len() >= 36, "only {} checks", lines.len());
    for line in &lines {
        assert!(line.starts_with("PASS "), "{line}");
        assert!(line.contains("max_rel_err"), "{line}");
    }
}

#[test]
fn gradcheck_filter_selects_and_unknown_filter_is_a_usage_error() {
    let out = run(&["gradcheck", "--ops", "conv1d"]);
    assert!(out.status.success());
    assert_eq!(stdout_of(&out).lines().count(), 2);

    let out = run(&["gradcheck", "--ops", "no_such_check"]);
    assert!(!out.status.success());
    let err = stderr_of(&out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("usage: "), "{err}");
}

#[test]
fn train_twice_with_the_same_seed_writes_byte_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), 7);
    let out1 = train_into(&cfg, &dir.path().join("r1"));
    assert!(out1.status.success(), "stderr: {}", stderr_of(&out1));
    let out2 = train_into(&cfg, &dir.path().join("r2"));
    assert!(out2.status.success());

    for file in ["metrics.jsonl", "final.ckpt", "best_a.ckpt", "best_mm.ckpt"] {
        let a = std::fs::read(dir.path().join("r1").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("r2").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn the_seed_flag_overrides_the_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), 7);
    let base = train_into(&cfg, &dir.path().join("base"));
    assert!(base.status.success());
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("seeded").to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert!(out.status.success());
    let a = std::fs::read(dir.path().join("base/metrics.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("seeded/metrics.jsonl")).unwrap();
    assert_ne!(a, b, "a different seed must change the run");
}

#[test]
fn eval_prints_metrics_for_the_requested_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), 7);
    assert!(train_into(&cfg, &dir.path().join("run")).status.success());
    let out = run(&[
        "eval",
        "--checkpoint",
        dir.path().join("run/best_a.ckpt").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--split",
        "val",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let stdout = stdout_of(&out);
    let mut branches = Vec::new();
    for line in stdout.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("each line is JSON");
        assert_eq!(v["split"], "val");
        assert_eq!(v["metric"], "accuracy");
        branches.push(v["branch"].as_str().unwrap().to_string());
    }
    assert_eq!(branches, ["a", "b", "mm"]);

    let out = run(&[
        "eval",
        "--checkpoint",
        dir.path().join("run/best_a.ckpt").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--split",
        "nope",
    ]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).starts_with("usage: "), "{}", stderr_of(&out));
}

#[test]
fn extract_keeps_one_modality_and_drops_the_fused_branch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), 7);
    assert!(train_into(&cfg, &dir.path().join("run")).status.success());
    let extracted = dir.path().join("a.ckpt");
    let out = run(&[
        "extract",
        "--checkpoint",
        dir.path().join("run/final.ckpt").to_str().unwrap(),
        "--modality",
        "a",
        "--out",
        extracted.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));

    let entries = comodal::io::read_checkpoint(&extracted).unwrap();
    assert!(!entries.is_empty());
    for e in &entries {
        assert!(e.name.starts_with("a."), "unexpected entry {}", e.name);
    }

    let full = comodal::io::read_checkpoint(&dir.path().join("run/final.ckpt")).unwrap();
    let full_a: Vec<_> = full.into_iter().filter(|e| e.name.starts_with("a.")).collect();
    assert_eq!(entries, full_a, "extraction must not alter values");

    let out = run(&[
        "extract",
        "--checkpoint",
        dir.path().join("run/final.ckpt").to_str().unwrap(),
        "--modality",
        "zz",
        "--out",
        dir.path().join("zz.ckpt").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = stderr_of(&out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("mismatch: "), "{err}");
}

#[test]
fn ablate_alpha_sweep_writes_the_protocol_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), 7);
    let out = run(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--variant",
        "alpha_sweep",
        "--seeds",
        "1",
        "--out",
        dir.path().join("abl").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let csv = std::fs::read_to_string(dir.path().join("abl/ablation_alpha_sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,alpha,seed,test_acc_a,test_acc_b,test_acc_mm");
    // 4 alphas x (1 seed + mean)
    assert_eq!(lines.len(), 9);
    let alphas: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(alphas, ["1", "1", "5", "5", "10", "10", "20", "20"]);

    let out = run(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--variant",
        "bogus",
        "--seeds",
        "1",
        "--out",
        dir.path().join("abl2").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).starts_with("usage: "), "{}", stderr_of(&out));
}

#[test]
fn config_errors_are_one_line_and_categorized() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"modalities": [{"name": "a"}, {"name": "b"}], "loss": {"alpha": -1.0},
           "data": {"latent_dim": 4, "train": 4, "val": 2, "test": 2}}"#,
    )
    .unwrap();
    let out = run(&[
        "train",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = stderr_of(&out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("config: "), "{err}");
    assert!(err.contains("alpha"), "{err}");

    let out = run(&[
        "train",
        "--config",
        dir.path().join("missing.json").to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).starts_with("io: "), "{}", stderr_of(&out));
}

#[test]
fn a_truncated_checkpoint_is_a_format_error_with_an_offset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), 7);
    assert!(train_into(&cfg, &dir.path().join("run")).status.success());
    let full = std::fs::read(dir.path().join("run/final.ckpt")).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &full[..full.len() / 2]).unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        cut.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--split",
        "test",
    ]);
    assert!(!out.status.success());
    let err = stderr_of(&out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("format: "), "{err}");
    assert!(err.contains("byte"), "{err}");
}
