use std::path::Path;
use std::process::{Command, Output};

fn hmsv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hmsv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

/// Small single-split profile rooted in `dir`.
fn write_config(dir: &Path) -> String {
    let text = format!(
        "profile = toy\n\
         model.full_resolution = 32\n\
         model.branches.0.resolution = 32\n\
         model.branches.1.resolution = 16\n\
         model.branches.2.resolution = 8\n\
         model.branches.3.resolution = 4\n\
         synth.size = 32\n\
         synth.count = 8\n\
         schedule.max_steps = 4\n\
         schedule.max_epochs = 2\n\
         paths.manifest = {}\n\
         paths.out = {}\n",
        dir.join("data/manifest.tsv").display(),
        dir.join("runs").display()
    );
    let mut text = text;
    for k in 0..4 {
        text.push_str(&format!(
            "model.branches.{k}.channels = [4,8]\nmodel.branches.{k}.bottleneck = 16\n"
        ));
    }
    let path = dir.join("small.cfg");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn config_and_io_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    assert_eq!(
        code(&hmsv(&["synth", "--config", missing.to_str().unwrap()])),
        3
    );
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "schedule.batch_size = two\n").unwrap();
    let o = hmsv(&["synth", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("schedule.batch_size"));
    assert_ne!(code(&hmsv(&["eval", "--checkpoint", "x", "--tta", "3"])), 0);
}

#[test]
fn synth_train_eval_infer_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = hmsv(&["synth", "--config", &cfg, "--threads", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = std::fs::read_to_string(dir.path().join("data/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 9);

    let o = hmsv(&["splits", "--config", &cfg]);
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("runs/folds.tsv").exists());
    assert!(String::from_utf8_lossy(&o.stdout).contains("LODO skipped"));

    let o = hmsv(&["train", "--config", &cfg, "--threads", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("runs/single");
    let log = std::fs::read_to_string(run.join("log.tsv")).unwrap();
    assert!(log.starts_with("# config_hash\t"));
    assert!(log.lines().any(|l| l.starts_with("init\t")));
    let ckpt = run.join("last.ckpt");
    assert!(ckpt.exists() && run.join("best.ckpt").exists());

    let out = dir.path().join("eval");
    let o = hmsv(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let tsv = std::fs::read_to_string(out.join("metrics_tta0.tsv")).unwrap();
    let rows = tsv
        .lines()
        .filter(|l| l.starts_with("image\tsynth\t"))
        .count();
    assert_eq!(rows, 8);

    let image = dir.path().join("data/images/0000.png");
    let o = hmsv(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--tta",
        "8",
        "--out",
        out.to_str().unwrap(),
        image.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("0000_prob.png").exists() && out.join("0000_mask.png").exists());

    let broken = dir.path().join("broken.ckpt");
    std::fs::write(&broken, b"NOPE").unwrap();
    assert_eq!(
        code(&hmsv(&["eval", "--checkpoint", broken.to_str().unwrap()])),
        3
    );
}
