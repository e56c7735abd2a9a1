use std::path::Path;
use std::process::{Command, Output};

use xdomain::image_io::load_png;

fn xdomain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xdomain"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = xdomain(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 20] = [
    "--set",
    "n_neg=4",
    "--set",
    "image_size=32",
    "--set",
    "content_channels=8",
    "--set",
    "ea_hidden=16",
    "--set",
    "embed_dim=16",
    "--set",
    "head_hidden=16",
    "--set",
    "disc_channels=8",
    "--set",
    "epochs_flat=1",
    "--set",
    "epochs_decay=0",
    "--set",
    "steps_per_epoch=2",
];

/// Generates 6 scenes and trains a tiny model on them.
fn trained(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = dir.join("data");
    ok(&[
        "--seed",
        "3",
        "generate-synthetic",
        "--scenes",
        "6",
        "--domains",
        "day,night",
        "--size",
        "32",
        "--out",
        s(&data),
    ]);
    let run = dir.join("run");
    let manifest = data.join("manifest.jsonl");
    let mut args = vec![
        "--seed",
        "5",
        "train",
        "--manifest",
        s(&manifest),
        "--out",
        s(&run),
    ];
    args.extend(SMALL);
    let stdout = ok(&args);
    assert!(
        stdout.contains("seed = 5"),
        "resolved config is printed: {stdout}"
    );
    (data, run.join("checkpoint.bin"))
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ck) = trained(dir.path());
    assert!(ck.exists());

    let report = dir.path().join("recall.json");
    let stdout = ok(&[
        "localize-eval",
        "--checkpoint",
        s(&ck),
        "--queries",
        s(&data.join("queries.jsonl")),
        "--references",
        s(&data.join("manifest.jsonl")),
        "--out",
        s(&report),
    ]);
    assert!(stdout.contains("night"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["groups"]["night"]["queries"], 6);
    let r = json["overall"]["recall"].as_array().unwrap();
    assert_eq!(r.len(), 3);
    assert!(r.windows(2).all(|w| w[0].as_f64() <= w[1].as_f64()));

    let img = |d: &str, i: usize| data.join(format!("images/{d}_s{i:04}.png"));
    let out = dir.path().join("t.png");
    ok(&[
        "translate",
        "--checkpoint",
        s(&ck),
        "--source",
        s(&img("day", 0)),
        "--target",
        s(&img("night", 1)),
        "--out",
        s(&out),
    ]);
    let t = load_png(&out).unwrap();
    assert_eq!((t.width(), t.height()), (32, 32));

    let grid = dir.path().join("grid.png");
    let list = |d: &str| {
        (0..3)
            .map(|i| img(d, i).display().to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    ok(&[
        "grid",
        "--checkpoint",
        s(&ck),
        "--sources",
        &list("day"),
        "--targets",
        &list("night"),
        "--out",
        s(&grid),
    ]);
    let g = load_png(&grid).unwrap();
    assert_eq!((g.width(), g.height()), (96, 96));

    let pairs = dir.path().join("pairs.jsonl");
    ok(&[
        "mine-pairs",
        "--manifest",
        s(&data.join("manifest.jsonl")),
        "--checkpoint",
        s(&ck),
        "--out",
        s(&pairs),
    ]);
    let text = std::fs::read_to_string(&pairs).unwrap();
    assert_eq!(text.lines().count(), 12);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let (src, tgt) = (v["source"].as_str().unwrap(), v["target"].as_str().unwrap());
        assert_ne!(
            src.contains("day"),
            tgt.contains("day"),
            "pairs cross domains"
        );
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(&[
            "--seed",
            seed,
            "generate-synthetic",
            "--scenes",
            "3",
            "--domains",
            "day,dusk",
            "--size",
            "32",
            "--out",
            s(&out),
        ]);
        std::fs::read(out.join("images/dusk_s0002.png")).unwrap()
    };
    assert_eq!(gen("a", "1"), gen("b", "1"));
    assert_ne!(gen("a", "1"), gen("c", "2"));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = xdomain(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = xdomain(&["translate", "--bogus", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_one_with_single_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    let out = xdomain(&[
        "translate",
        "--checkpoint",
        s(&missing),
        "--source",
        "a.png",
        "--target",
        "b.png",
        "--out",
        "c.png",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"));
}

#[test]
fn bad_override_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = xdomain(&[
        "train",
        "--manifest",
        "m.jsonl",
        "--out",
        s(dir.path()),
        "--set",
        "no_such_key=1",
    ]);
    assert_eq!(out.status.code(), Some(1));
}
