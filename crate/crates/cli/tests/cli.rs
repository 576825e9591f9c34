use std::path::Path;
use std::process::{Command, Output};

fn hdrlift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdrlift")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let out = hdrlift(&["train", "--set", "train.learnin_rate=1", "--run-dir", "/nonexistent/x"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.learnin_rate"));
}

#[test]
fn missing_checkpoint_exits_with_checkpoint_code() {
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("x.png");
    hdrlift_core::LdrImage::filled(8, 8, 100).unwrap().write_png(&png).unwrap();
    let out = hdrlift(&[
        "infer",
        "--checkpoint",
        s(&dir.path().join("none.ckpt")),
        "--input",
        s(&png),
        "--output",
        s(&dir.path().join("o.hdr")),
    ]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn bad_usage_exits_with_usage_code() {
    assert_eq!(hdrlift(&["train"]).status.code(), Some(2));
}

#[test]
fn synth_train_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&hdrlift(&[
        "synth-data",
        "--hdr-dir",
        s(&d.join("hdr")),
        "--out-dir",
        s(&d.join("set")),
        "--generate",
        "5",
        "--exposures",
        "2:-20,0.5:0,1:0",
    ]));
    let manifest = std::fs::read_to_string(d.join("set/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 15);
    assert!(manifest.lines().next().unwrap().ends_with("\t0"));

    let cfg = d.join("run.cfg");
    std::fs::write(
        &cfg,
        "# tiny run\ndata.train_manifest = set/manifest.txt\ntrain.batch_size = 2\ntrain.epochs = 1\nvae.steps = 5\nsample.steps = 3\n",
    )
    .unwrap();
    let run = d.join("run");
    ok(&hdrlift(&["train", "--config", s(&cfg), "--set", "train.max_steps=2", "--run-dir", s(&run)]));
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let row: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for k in ["epoch", "step", "l_d", "l_mat", "l_full"] {
        assert!(row.get(k).is_some(), "{k}");
    }
    let artifacts: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("artifacts.json")).unwrap()).unwrap();
    assert!(artifacts.as_array().unwrap().iter().any(|a| a["path"] == "last.ckpt"));

    // the snapshot alone reproduces the configuration
    ok(&hdrlift(&["train", "--config", s(&run.join("config.cfg")), "--set", "train.max_steps=3", "--set", "train.epochs=2", "--run-dir", s(&run), "--resume", s(&run.join("last.ckpt"))]));
    let steps: Vec<u64> = std::fs::read_to_string(run.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, [0, 1, 2]);

    let ldr = d.join("set/ldr/scene0000_e1.png");
    let out = d.join("infer/out.hdr");
    std::fs::create_dir_all(out.parent().unwrap()).unwrap();
    ok(&hdrlift(&["infer", "--checkpoint", s(&run.join("last.ckpt")), "--input", s(&ldr), "--output", s(&out), "--steps", "3"]));
    assert!(out.exists() && d.join("infer/out.png").exists());
    let img = hdrlift_core::hdr::read_rgbe_file(&out).unwrap();
    assert_eq!((img.height(), img.width()), (64, 64));

    let ev = d.join("eval");
    ok(&hdrlift(&[
        "eval",
        "--config",
        s(&run.join("config.cfg")),
        "--checkpoint",
        s(&run.join("last.ckpt")),
        "--manifest",
        s(&run.join("split/test.txt")),
        "--run-dir",
        s(&ev),
    ]));
    let csv = std::fs::read_to_string(ev.join("report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "id,psnr_db,ssim,perceptual,vdp_q");
    assert_eq!(csv.lines().count(), 2);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["evaluated"], 1);
}
