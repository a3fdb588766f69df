use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_stepalign");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec![
        "synth",
        "--manuals",
        "5",
        "--steps",
        "3..6",
        "--videos",
        "3..4",
        "--dim",
        "16",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--set",
        "embed_dim=32",
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn two_epoch_train_writes_checkpoint_and_echoes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    synth(&data, &[]);
    let stdout = train(&data, &model, &["--set", "epochs=2"]);
    assert!(stdout.contains("lr = 5e-4"), "{stdout}");
    assert!(stdout.contains("wd = 5e-3"), "{stdout}");
    assert!(stdout.contains("batch_size = 128"), "{stdout}");
    for f in ["model.ckpt", "train_log.csv", "config.txt", "run.json"] {
        assert!(model.join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(model.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let echoed = std::fs::read_to_string(model.join("config.txt")).unwrap();
    assert!(echoed.contains("epochs = 2"));
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(model.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "train");
    assert!(run["finished_at"].as_f64().is_some());
}

#[test]
fn retrieval_on_noiseless_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    synth(&data, &["--sigma", "0", "--drift", "0"]);
    train(&data, &model, &["--set", "epochs=10", "--set", "steps_per_epoch=60"]);
    let ds = stepalign::data::load_manifest(data.join("manifest.json")).unwrap();
    let test = &ds.splits[&stepalign::data::Split::Test];
    let video = ds.video(&test[0]).unwrap();
    let ckpt = model.join("model.ckpt");
    let common = [
        "retrieve",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ];

    let mut hits = 0;
    for seg in &video.segments {
        let mut args = common.to_vec();
        args.extend(["--query", &seg.segment_id, "--k", "1"]);
        let stdout = ok(&args);
        let line = stdout.lines().next().unwrap();
        let gt = &ds.manual_of(video).steps[seg.gt_step_index.unwrap() - 1].diagram_id;
        assert_eq!(line.split('\t').count(), 3);
        hits += usize::from(line.split('\t').nth(1) == Some(gt.as_str()));
    }
    assert_eq!(hits, video.segments.len());

    let m = ds.manual_of(video).steps.len();
    let mut args = common.to_vec();
    let k = (m + 5).to_string();
    args.extend(["--query", &video.segments[0].segment_id, "--k", &k]);
    let out = run(&args);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), m);
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncated"));

    let mut args = common.to_vec();
    args.extend(["--query", "no_such_segment"]);
    assert_eq!(run(&args).status.code(), Some(1));
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["gradcheck", "--instances", "2"]).status.code(), Some(0));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, &[]);
    assert_eq!(
        run(&["validate", "--data", data.to_str().unwrap()]).status.code(),
        Some(0)
    );
    let bad = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("m").to_str().unwrap(),
        "--set",
        "lr=-1",
    ]);
    assert_eq!(bad.status.code(), Some(1));

    let model = dir.path().join("model");
    train(&data, &model, &["--set", "epochs=1"]);
    let capped = run(&[
        "align",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        model.join("model.ckpt").to_str().unwrap(),
        "--method",
        "ot",
        "--epsilon",
        "0.01",
        "--max-iter",
        "1",
        "--out",
        dir.path().join("al").to_str().unwrap(),
    ]);
    assert_eq!(capped.status.code(), Some(2));
}

#[test]
fn split_reassigns_whole_videos() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, &[]);
    let out = dir.path().join("resplit.json");
    ok(&[
        "split",
        "--manifest",
        data.join("manifest.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--ratios",
        "0.6,0.2,0.2",
        "--seed",
        "3",
    ]);
    let ds = stepalign::data::load_manifest(&out).unwrap();
    let listed: usize = ds.splits.values().map(Vec::len).sum();
    assert_eq!(listed, ds.videos.len());
    assert!(dir.path().join("resplit.run.json").exists());
}
