use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn eaanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eaanet")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = eaanet(args);
    assert!(
        out.status.success(),
        "eaanet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let cfg = dir.path().join("train.cfg");
    fs::write(&cfg, "depth = 2\nbase_channels = 4\nbatch_size = 2\n").unwrap();

    ok(&["gen-data", "--seed", "5", "--volumes", "2", "--slices", "4", "--size", "16", "--out-dir", s(&data)]);
    assert!(data.join("vol_000.eaav").exists() && data.join("vol_001.eaav").exists());

    let stdout = ok(&[
        "train", "--config", s(&cfg), "--data-dir", s(&data), "--out-dir", s(&run), "--seed", "3", "--epochs", "2",
        "--lr", "0.002",
    ]);
    assert!(stdout.contains("epoch,lr,loss_a,loss_s,loss_b,loss_c,total,train_dsc"));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let ckpt = run.join("model.eaac");
    let csv = dir.path().join("metrics.csv");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data-dir", s(&data), "--csv-out", s(&csv)]);
    let metrics = fs::read_to_string(&csv).unwrap();
    assert!(metrics.starts_with("dsc,hd,hd95,sensitivity,specificity,volume_similarity\n"));
    assert_eq!(metrics.lines().count(), 3);

    let pred = dir.path().join("pred.eaav");
    ok(&["predict", "--checkpoint", s(&ckpt), "--volume", s(&data.join("vol_000.eaav")), "--mask-out", s(&pred)]);
    let v = eaanet::data::load_volume(&pred).unwrap();
    assert_eq!((v.depth, v.height, v.width), (2, 16, 16));
}

#[test]
fn training_is_reproducible_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = dir.path().join("train.cfg");
    fs::write(&cfg, "depth = 2\nbase_channels = 2\nepochs = 2\n").unwrap();
    ok(&["gen-data", "--volumes", "1", "--slices", "4", "--size", "16", "--out-dir", s(&data)]);
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        ok(&["train", "--config", s(&cfg), "--data-dir", s(&data), "--out-dir", s(&out)]);
        logs.push((
            fs::read(out.join("train_log.csv")).unwrap(),
            fs::read(out.join("model.eaac")).unwrap(),
        ));
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn gradcheck_succeeds() {
    let stdout = ok(&["gradcheck"]);
    assert!(stdout.contains("network"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = eaanet(&["eval", "--checkpoint", s(&dir.path().join("missing.eaac")), "--data-dir", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "colour = blue\n").unwrap();
    ok(&["gen-data", "--volumes", "1", "--slices", "3", "--size", "16", "--out-dir", s(dir.path())]);
    let out = eaanet(&["train", "--config", s(&bad), "--data-dir", s(dir.path()), "--out-dir", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}
