use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gramophone_core::dsp::{load_wav, write_wav, Signal, SAMPLE_RATE};

const FAST: &[&str] = &["--channels", "8", "--iters", "3", "--gl-iters", "2"];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gramophone"))
}

fn tone(dir: &Path, name: &str, hz: f64, secs: f64) -> PathBuf {
    let sr = SAMPLE_RATE as f64;
    let n = (secs * sr) as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            0.4 * (2.0 * PI * hz * t).sin() + 0.1 * (2.0 * PI * 3.1 * hz * t).sin()
        })
        .collect();
    let path = dir.join(name);
    write_wav(&path, &Signal::new(samples, SAMPLE_RATE).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "metadata.cfg")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn texture_run_writes_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let style = tone(tmp.path(), "s.wav", 440.0, 0.5);
    let out = tmp.path().join("o");
    let mut args = vec!["--style", style.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend(FAST);
    ok(&args);
    for f in ["out.wav", "out.png", "style_0.png", "trace.csv", "metadata.cfg"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert!(!out.join("content.png").exists());
    let meta = fs::read_to_string(out.join("metadata.cfg")).unwrap();
    for key in ["alpha = 0e0", "beta = 1e9", "seed = 0", "channels = 8", "iters = 3"] {
        assert!(meta.lines().any(|l| l == key), "{key} not in\n{meta}");
    }
}

#[test]
fn five_second_texture_duration() {
    let tmp = tempfile::tempdir().unwrap();
    let style = tone(tmp.path(), "s.wav", 220.0, 5.0);
    let out = tmp.path().join("o");
    let mut args = vec!["--style", style.to_str().unwrap(), "--out", out.to_str().unwrap(), "--no-png"];
    args.extend(["--channels", "4", "--iters", "1", "--gl-iters", "1"]);
    ok(&args);
    let wav = load_wav(out.join("out.wav")).unwrap();
    let expected = 431.0 * 256.0 / 22050.0;
    assert!((wav.duration_secs() - expected).abs() <= 1024.0 / 22050.0, "{}", wav.duration_secs());
    assert!(!out.join("out.png").exists());
}

#[test]
fn same_seed_gives_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let style = tone(tmp.path(), "s.wav", 330.0, 0.4);
    let content = tone(tmp.path(), "c.wav", 500.0, 0.4);
    let mut outs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let mut args = vec![
            "--style",
            style.to_str().unwrap(),
            "--content",
            content.to_str().unwrap(),
            "--alpha",
            "1",
            "--beta",
            "1e8",
            "--init",
            "content",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend(FAST);
        ok(&args);
        outs.push(artifacts(&out));
    }
    assert_eq!(outs[0].len(), 5);
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn metadata_reproduces_run() {
    let tmp = tempfile::tempdir().unwrap();
    let style = tone(tmp.path(), "s.wav", 300.0, 0.4);
    let first = tmp.path().join("first");
    let mut args = vec![
        "--style",
        style.to_str().unwrap(),
        "--seed",
        "4",
        "--orientation",
        "2d",
        "--kernel-width",
        "3",
        "--out-frames",
        "40",
        "--out",
        first.to_str().unwrap(),
    ];
    args.extend(FAST);
    ok(&args);

    let second = tmp.path().join("second");
    let meta = first.join("metadata.cfg");
    ok(&["--config", meta.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(artifacts(&first), artifacts(&second));
    assert_eq!(
        fs::read_to_string(meta).unwrap(),
        fs::read_to_string(second.join("metadata.cfg")).unwrap()
    );
}

#[test]
fn trace_rows_follow_log_interval() {
    let tmp = tempfile::tempdir().unwrap();
    let style = tone(tmp.path(), "s.wav", 300.0, 0.3);
    for (iters, every) in [("5", "2"), ("6", "3"), ("4", "1")] {
        let out = tmp.path().join(format!("o{iters}"));
        ok(&[
            "--style",
            style.to_str().unwrap(),
            "--channels",
            "4",
            "--gl-iters",
            "1",
            "--iters",
            iters,
            "--log-every",
            every,
            "--out",
            out.to_str().unwrap(),
        ]);
        let csv = fs::read_to_string(out.join("trace.csv")).unwrap();
        let rows = csv.lines().count() - 1;
        let (n, k): (usize, usize) = (iters.parse().unwrap(), every.parse().unwrap());
        assert_eq!(rows, n.div_ceil(k), "iters {n} every {k}");
    }
}

#[test]
fn usage_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let style = tone(tmp.path(), "s.wav", 300.0, 0.2);
    let s = style.to_str().unwrap();
    for args in [
        vec![],
        vec!["--style", s, "--alpha", "1"],
        vec!["--style", s, "--bogus"],
        vec!["--style", s, "--orientation", "3d"],
    ] {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn unreadable_input_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.wav");
    let out = run(&["--style", missing.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
