//! End-to-end command-line tests against the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adverseg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn gen_dataset(dir: &Path, count: u32, seed: u64) {
    let out = run(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--count",
        &count.to_string(),
        "--size",
        "16",
        "--classes",
        "3",
        "--seed",
        &seed.to_string(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn gen_data_writes_manifest_and_pairs() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), 5, 3);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    let mut lines = manifest.lines();
    assert_eq!(lines.next().unwrap(), "C=3 H=16 W=16 CIN=1");
    assert_eq!(lines.count(), 5);
    assert!(dir.path().join("img_00000.tsr").exists());
    assert!(dir.path().join("lbl_00004.tsr").exists());
}

#[test]
fn pipeline_train_eval_report() {
    let root = tempfile::tempdir().unwrap();
    let ds = root.path().join("ds");
    gen_dataset(&ds, 10, 3);
    let rundir = root.path().join("run");
    let out = run(&[
        "train",
        "--data",
        ds.join("manifest.txt").to_str().unwrap(),
        "--out",
        rundir.to_str().unwrap(),
        "--no-adversarial",
        "--steps",
        "2",
        "--batch-size",
        "4",
        "--seed",
        "1",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("trained 2 steps"));

    let metrics = root.path().join("eval.txt");
    let out = run(&[
        "eval",
        "--data",
        ds.join("manifest.txt").to_str().unwrap(),
        "--checkpoint",
        rundir.join("final.ckpt").to_str().unwrap(),
        "--out",
        metrics.to_str().unwrap(),
        "--model",
        "Ours",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let line = std::fs::read_to_string(&metrics).unwrap();
    assert!(line.starts_with("model=Ours pa="), "{line}");

    let out = run(&["report", "--in", metrics.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let header: Vec<&str> = text.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, vec!["Model", "pa", "recall", "iou", "dice"]);
    assert!(text.lines().nth(1).unwrap().starts_with("Ours"));
}

#[test]
fn report_unknown_column_exits_2_listing_valid() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("m.txt");
    std::fs::write(&file, "model=Ours pa=0.5 recall=0.5 iou=0.5 dice=0.5\n").unwrap();
    let out = run(&["report", "--in", file.to_str().unwrap(), "--columns", "pa,bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("bogus"), "{err}");
    assert!(err.contains("pa, recall, iou, dice"), "{err}");
}

#[test]
fn train_rejects_bad_config_with_exit_2() {
    let root = tempfile::tempdir().unwrap();
    let ds = root.path().join("ds");
    gen_dataset(&ds, 4, 3);
    let cfg = root.path().join("cfg.txt");
    std::fs::write(&cfg, "frobnicate=1\n").unwrap();
    let out = run(&[
        "train",
        "--data",
        ds.join("manifest.txt").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        root.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("frobnicate"));

    // class count stated in the config must match the dataset
    std::fs::write(&cfg, "num_classes=7\n").unwrap();
    let out = run(&[
        "train",
        "--data",
        ds.join("manifest.txt").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        root.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("num_classes"));
}

#[test]
fn train_flag_overrides_config_value() {
    let root = tempfile::tempdir().unwrap();
    let ds = root.path().join("ds");
    gen_dataset(&ds, 8, 3);
    let cfg = root.path().join("cfg.txt");
    std::fs::write(&cfg, "steps=50\nadversarial=false\nbatch_size=4\n").unwrap();
    let out = run(&[
        "train",
        "--data",
        ds.join("manifest.txt").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        root.path().join("run").to_str().unwrap(),
        "--steps",
        "1",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("trained 1 steps"));
}

#[test]
fn eval_on_corrupt_checkpoint_fails_with_offset() {
    let root = tempfile::tempdir().unwrap();
    let ds = root.path().join("ds");
    gen_dataset(&ds, 4, 3);
    let bad = root.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let out = run(&[
        "eval",
        "--data",
        ds.join("manifest.txt").to_str().unwrap(),
        "--checkpoint",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("byte offset"), "{}", stderr(&out));
}

#[test]
fn gradcheck_passes_and_corrupt_flag_fails() {
    let out = run(&["gradcheck", "--layer", "conv2d", "--seed", "42"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("pass conv2d rel_err="));

    let out = run(&["gradcheck", "--layer", "conv2d", "--seed", "42", "--corrupt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL conv2d"));

    let out = run(&["gradcheck", "--layer", "warp-drive"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn env_seed_fallback_matches_explicit_flag() {
    let root = tempfile::tempdir().unwrap();
    let via_flag = root.path().join("a");
    let via_env = root.path().join("b");
    gen_dataset(&via_flag, 3, 77);
    let out = bin()
        .args([
            "gen-data",
            "--out",
            via_env.to_str().unwrap(),
            "--count",
            "3",
            "--size",
            "16",
            "--classes",
            "3",
        ])
        .env("ADVERSEG_SEED", "77")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    for i in 0..3 {
        let name = format!("img_{i:05}.tsr");
        assert_eq!(
            std::fs::read(via_flag.join(&name)).unwrap(),
            std::fs::read(via_env.join(&name)).unwrap()
        );
    }
}

#[test]
fn train_resume_continues_from_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let ds = root.path().join("ds");
    gen_dataset(&ds, 8, 3);
    let manifest = ds.join("manifest.txt");
    let full = root.path().join("full");
    let half = root.path().join("half");
    let rest = root.path().join("rest");
    let base_args = |out_dir: &Path, steps: &str| -> Vec<String> {
        vec![
            "train".into(),
            "--data".into(),
            manifest.to_str().unwrap().into(),
            "--out".into(),
            out_dir.to_str().unwrap().into(),
            "--no-adversarial".into(),
            "--batch-size".into(),
            "4".into(),
            "--seed".into(),
            "9".into(),
            "--steps".into(),
            steps.into(),
        ]
    };
    let out = bin().args(base_args(&full, "4")).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let out = bin().args(base_args(&half, "2")).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let mut args = base_args(&rest, "4");
    args.push("--resume".into());
    args.push(half.join("final.ckpt").to_str().unwrap().into());
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        std::fs::read(full.join("final.ckpt")).unwrap(),
        std::fs::read(rest.join("final.ckpt")).unwrap()
    );
}
