//! Runs the built binary end to end on small synthetic data.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY_NET: &[&str] = &[
    "--num-blocks",
    "1",
    "--layers-per-block",
    "2",
    "--growth-rate",
    "4",
    "--input-size",
    "16",
];
const TINY_TRAIN: &[&str] = &[
    "--epochs",
    "2",
    "--batch-size",
    "8",
    "--learning-rate",
    "0.01",
    "--no-augment",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_densecyst"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, out: &str, n: &str, seed: &str) -> String {
    ok(
        dir,
        &[
            "synth",
            "--out",
            out,
            "--n-per-class",
            n,
            "--seed",
            seed,
            "--depth",
            "8",
            "--height",
            "32",
            "--width",
            "32",
        ],
    )
}

fn train_tiny(dir: &Path) {
    synth(dir, "data", "2", "3");
    let mut args = vec!["train", "--manifest", "data/manifest.csv", "--out", "model.dcys"];
    args.extend(TINY_NET);
    args.extend(TINY_TRAIN);
    ok(dir, &args);
}

#[test]
fn synth_writes_counted_reproducible_files() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = synth(dir.path(), "a", "5", "7");
    assert_eq!(stdout, "IPMN,5\nMCN,5\nSCN,5\nSPT,5\n");
    synth(dir.path(), "b", "5", "7");
    let rvols: Vec<_> = fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".rvol"))
        .collect();
    assert_eq!(rvols.len(), 20);
    let manifest = fs::read_to_string(dir.path().join("a/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 21, "header plus 20 rows");
    for name in rvols.iter().map(String::as_str).chain(["manifest.csv"]) {
        assert_eq!(
            fs::read(dir.path().join("a").join(name)).unwrap(),
            fs::read(dir.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn invalid_arguments_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["synth", "--n-per-class", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_per_class"));
    let out = run(
        dir.path(),
        &["predict", "--checkpoint", "missing.dcys", "--volume", "x.rvol"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.dcys"));
    let out = run(dir.path(), &["train", "--manifest", "absent.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(dir.path(), &["train", "--help"]);
    for needle in [
        "--batch-size",
        "[default: 40]",
        "[default: 0.0005]",
        "[default: 100]",
        "[default: 144]",
    ] {
        assert!(help.contains(needle), "{needle} missing from help");
    }
}

#[test]
fn train_predict_and_saliency() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    train_tiny(d);
    assert!(d.join("model.dcys").exists());
    let loss = fs::read_to_string(d.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3, "header plus one row per epoch");

    let stdout = ok(
        d,
        &[
            "predict",
            "--checkpoint",
            "model.dcys",
            "--manifest",
            "data/manifest.csv",
        ],
    );
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 8);
    for line in &lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 6, "{line}");
        let probs: Vec<f64> = cells[1..5].iter().map(|c| c.parse().unwrap()).collect();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6, "{line}");
        assert!(["IPMN", "MCN", "SCN", "SPT"].contains(&cells[5]));
    }
    let first = lines[0].split(',').next().unwrap();
    let single = ok(
        d,
        &[
            "predict",
            "--checkpoint",
            "model.dcys",
            "--volume",
            &format!("data/{first}.rvol"),
        ],
    );
    assert_eq!(single.trim(), lines[0]);

    let out = run(
        d,
        &[
            "predict",
            "--checkpoint",
            "model.dcys",
            "--manifest",
            "data/manifest.csv",
            "--threshold",
            "1",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("patient"));

    let args = [
        "saliency",
        "--checkpoint",
        "model.dcys",
        "--volume",
        &format!("data/{first}.rvol"),
        "--out",
        "maps",
    ];
    ok(d, &args);
    let maps: Vec<_> = fs::read_dir(d.join("maps"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert!(!maps.is_empty());
    for m in &maps {
        let bytes = fs::read(m).unwrap();
        assert!(bytes.starts_with(b"P5\n16 16\n255\n"), "{}", m.display());
    }
    let out = run(
        d,
        &[
            "saliency",
            "--checkpoint",
            "model.dcys",
            "--volume",
            &format!("data/{first}.rvol"),
            "--target",
            "4",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cv_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "data", "2", "5");
    let mut reports = Vec::new();
    for out in ["cv1", "cv2"] {
        let mut args = vec![
            "cv",
            "--manifest",
            "data/manifest.csv",
            "--k",
            "2",
            "--seed",
            "1",
            "--out",
            out,
        ];
        args.extend(TINY_NET);
        args.extend(TINY_TRAIN);
        ok(d, &args);
        reports.push((
            fs::read(d.join(out).join("cv_report.csv")).unwrap(),
            fs::read(d.join(out).join("cv_table.txt")).unwrap(),
        ));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn config_file_fills_unset_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "data", "2", "3");
    fs::write(
        d.join("run.cfg"),
        "epochs = 3\nbatch_size = 8\nno-augment = true\nlearning-rate=0.01\n",
    )
    .unwrap();
    let mut args = vec![
        "train",
        "--config",
        "run.cfg",
        "--manifest",
        "data/manifest.csv",
        "--epochs",
        "1",
    ];
    args.extend(TINY_NET);
    ok(d, &args);
    let loss = fs::read_to_string(d.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 2, "command line epochs win over the file");

    fs::write(d.join("bad.cfg"), "epochz = 3\n").unwrap();
    let out = run(d, &["train", "--config", "bad.cfg", "--manifest", "data/manifest.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}
