use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn itov(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_itov"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = itov(args);
    assert!(
        out.status.success(),
        "itov {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic dataset plus a short stage-one checkpoint.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let manifest = PathBuf::from(ok(&["synth", "--dir", s(&data), "--count", "2", "--width", "24", "--height", "24", "--frames", "12", "--seed", "1"]).trim());
    assert!(manifest.exists());
    let cfg = dir.join("stage1.json");
    std::fs::write(
        &cfg,
        r#"{"stage":"noise_free","steps":3,"batch_size":2,"learning_rate":0.001,"pool_size":4,"eval_clips":2,
            "manifest":"data/manifest.json","checkpoint":"s1.safetensors",
            "net":{"message_length":8,"clip":{"frames":4,"height":16,"width":16},"block_kind":"depthwise2d","channels":4,"depth":1}}"#,
    )
    .unwrap();
    let ck = PathBuf::from(ok(&["train", "--config", s(&cfg), "--seed", "2"]).trim());
    assert_eq!(ck, dir.join("s1.safetensors"));
    (manifest, ck)
}

#[test]
fn train_evaluate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, ck) = fixture(dir.path());

    let run = |out: &Path| {
        ok(&[
            "evaluate", "--model", s(&ck), "--manifest", s(&manifest), "--distortions", "identity,frame_swap",
            "--n-clips", "2", "--seed", "7", "--out", s(out), "--model-id", "toy",
        ])
    };
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let printed = run(&a);
    run(&b);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(printed.trim(), std::fs::read_to_string(&a).unwrap().trim());
    assert!(a.with_extension("csv").exists());

    let table = ok(&["report", s(&a), s(&b), "--out", s(&dir.path().join("merged"))]);
    assert!(table.contains("toy") && table.contains("frame_swap"));
    assert!(dir.path().join("merged.csv").exists() && dir.path().join("merged.json").exists());

    let sweep = ok(&[
        "sweep-crf", "--model", s(&ck), "--manifest", s(&manifest), "--min", "20", "--max", "40", "--step", "20",
        "--n-clips", "1",
    ]);
    let rows: Vec<&str> = sweep.lines().collect();
    assert_eq!(rows[0], "crf,bit_accuracy");
    assert!(rows[1].starts_with("20,") && rows[2].starts_with("40,"));
    assert!(!itov(&["sweep-crf", "--model", s(&ck), "--manifest", s(&manifest), "--min", "30", "--max", "10"]).status.success());
}

#[test]
fn embed_extract_and_attack_files() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = fixture(dir.path());
    let small = dir.path().join("small");
    ok(&["synth", "--dir", s(&small), "--count", "1", "--width", "16", "--height", "16", "--frames", "14"]);
    let video = small.join("synth_000.mkv");

    let marked = dir.path().join("marked.mkv");
    ok(&["embed", "--model", s(&ck), "--input", s(&video), "--message", "c3", "--output", s(&marked)]);
    assert!(!itov(&["embed", "--model", s(&ck), "--input", s(&video), "--message", "c3c", "--output", s(&marked)]).status.success());

    let ex: serde_json::Value = serde_json::from_str(&ok(&["extract", "--model", s(&ck), "--input", s(&marked), "--json"])).unwrap();
    assert_eq!(ex["segments"], 3);
    assert_eq!(ex["bits"].as_str().unwrap().len(), 8);
    assert_eq!(ex["margins"].as_array().unwrap().len(), 8);
    let plain = ok(&["extract", "--model", s(&ck), "--input", s(&marked)]);
    assert!(plain.starts_with("bits ") && plain.contains("hex ") && plain.contains("confidence "));

    let same = dir.path().join("same.mkv");
    ok(&["attack", "--input", s(&marked), "--spec", "identity", "--output", s(&same)]);
    let pixels = |p: &Path| itov::media::read_video(p).unwrap().to_rgb24().unwrap();
    assert_eq!(pixels(&same), pixels(&marked));

    let (x, y) = (dir.path().join("x.mkv"), dir.path().join("y.mkv"));
    for out in [&x, &y] {
        ok(&["attack", "--input", s(&marked), "--spec", r#"{"kind":"gaussian_noise","std":0.05}"#, "--seed", "4", "--output", s(out)]);
    }
    assert_eq!(pixels(&x), pixels(&y));
    assert_ne!(pixels(&x), pixels(&marked));
    assert!(!itov(&["attack", "--input", s(&marked), "--spec", "sharpen", "--output", s(&x)]).status.success());
    assert!(!itov(&["attack", "--input", s(&marked), "--spec", r#"{"kind":"gaussian_noise","std":-1}"#, "--output", s(&x)]).status.success());
}

#[test]
fn resume_continues_a_stage() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = fixture(dir.path());
    let cfg = dir.path().join("stage1.json");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("\"steps\":3", "\"steps\":5");
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("s1b.safetensors");
    ok(&["train", "--config", s(&cfg), "--resume", s(&ck), "--out", s(&out), "--seed", "2"]);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(meta["step"], 5);
    assert_eq!(meta["history"].as_array().unwrap().len(), 5);
}
