use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_radar-depth"));
    c.env_remove("RADAR_DEPTH_DATA_ROOT").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?}\nstdout: {}\nstderr: {}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

const TINY: [&str; 12] = [
    "--set",
    "model.rgb_channels=[4, 4, 8, 8]",
    "--set",
    "model.decoder_channels=32",
    "--set",
    "train.epochs=2",
    "--set",
    "train.batch_size=4",
    "--set",
    "train.lr=0.01",
    "--set",
    "model.variant=two_stage",
];

fn synth(dir: &Path) {
    ok(&[
        "synth-gen",
        "--out",
        dir.to_str().unwrap(),
        "--count",
        "12",
        "--seed",
        "5",
        "--size",
        "32x64",
        "--val-every",
        "3",
    ]);
}

#[test]
fn end_to_end_train_eval_visualize() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let root = format!("data.root={}", data.display());
    let run_dir = tmp.path().join("run");
    let mut args = vec!["train", "--run-dir", run_dir.to_str().unwrap(), "--set", &root];
    args.extend(TINY);
    let out = ok(&args);
    assert_eq!(out.lines().filter(|l| l.starts_with("variant=two_stage_smooth epoch=")).count(), 2, "{out}");
    assert!(out.contains("output=stage1"));
    for f in ["config.toml", "train.log", "best.json", "last.json", "metrics.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let echoed = std::fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(echoed.contains("decoder_channels = 32"), "{echoed}");

    // Existing run directories are not clobbered; --resume is a no-op.
    let o = run(&args);
    assert_eq!(o.status.code(), Some(2));
    let mut resume = args.clone();
    resume.push("--resume");
    let log_before = std::fs::read_to_string(run_dir.join("train.log")).unwrap();
    ok(&resume);
    assert_eq!(std::fs::read_to_string(run_dir.join("train.log")).unwrap(), log_before);

    let ckpt = run_dir.join("best.json");
    let eval_args = ["eval", "--checkpoint", ckpt.to_str().unwrap(), "--set", &root];
    let a = ok(&eval_args);
    let b = ok(&eval_args);
    assert_eq!(a, b);
    assert!(a.contains("split=val output=final subset=all"), "{a}");

    let figs = tmp.path().join("figs");
    let listed = std::fs::read_dir(&data)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().into_string().unwrap())
        .take(3)
        .collect::<Vec<_>>();
    let ids = format!("{},missing_sample", listed.join(","));
    let out = ok(&[
        "visualize",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--samples",
        &ids,
        "--out",
        figs.to_str().unwrap(),
        "--set",
        &root,
    ]);
    assert_eq!(out.lines().count(), 3, "{out}");
    for id in &listed {
        let img = image::open(figs.join(format!("{id}.png"))).unwrap();
        assert!(img.width() > 64 && img.height() > 32);
    }
}

#[test]
fn same_config_and_seed_give_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let root = format!("data.root={}", data.display());
    let mut metrics = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let mut args = vec!["train", "--run-dir", dir.to_str().unwrap(), "--set", &root, "--set", "model.variant=late"];
        args.extend(&TINY[..10]);
        ok(&args);
        let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
        metrics.push(m);
    }
    assert_eq!(metrics[0], metrics[1]);
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let o = run(&["train", "--run-dir", run_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("data.root"));

    let o = run(&["train", "--run-dir", run_dir.to_str().unwrap(), "--set", "train.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nvariant = \"late\"\nunknown = 3\n").unwrap();
    let o = run(&["train", "--run-dir", run_dir.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["synth-gen", "--out", run_dir.to_str().unwrap(), "--size", "abc"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "not a checkpoint").unwrap();
    let root = format!("data.root={}", data.display());
    let o = run(&["eval", "--checkpoint", bad.to_str().unwrap(), "--set", &root]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn data_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let dir = tmp.path().join("run");
    let mut args = vec!["train", "--run-dir", dir.to_str().unwrap(), "--set", "train.epochs=1", "--set", "model.variant=rgb_only"];
    args.extend(&TINY[..4]);
    let o = bin().args(&args).env("RADAR_DEPTH_DATA_ROOT", &data).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_gen_resume_and_force() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let o = run(&["synth-gen", "--out", data.to_str().unwrap(), "--count", "12", "--seed", "5", "--size", "32x64", "--val-every", "3"]);
    assert_eq!(o.status.code(), Some(2));
    ok(&["synth-gen", "--out", data.to_str().unwrap(), "--count", "12", "--seed", "5", "--size", "32x64", "--val-every", "3", "--resume"]);
    let o = run(&["synth-gen", "--out", data.to_str().unwrap(), "--count", "12", "--seed", "6", "--size", "32x64", "--resume"]);
    assert_eq!(o.status.code(), Some(2));
    ok(&["synth-gen", "--out", data.to_str().unwrap(), "--count", "4", "--seed", "6", "--size", "32x64", "--force"]);
}
