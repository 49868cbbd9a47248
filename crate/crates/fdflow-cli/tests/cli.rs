//! End-to-end tests of the `fdflow` binary: exit codes, artifact round trips,
//! and log determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fdflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdflow"))
        .args(args)
        .output()
        .expect("spawn fdflow")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Grabs `key=<float>` out of a log line.
fn scrape(text: &str, key: &str) -> f64 {
    let needle = format!("{key}=");
    let start = text.find(&needle).unwrap_or_else(|| panic!("no {needle} in {text:?}"));
    let rest = &text[start + needle.len()..];
    let end = rest.find([' ', '\n']).unwrap_or(rest.len());
    rest[..end].parse().unwrap_or_else(|_| panic!("bad {needle} in {text:?}"))
}

fn write_ppm(path: &Path, w: usize, h: usize, pixel: impl Fn(usize, usize) -> [u8; 3]) {
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            bytes.extend_from_slice(&pixel(x, y));
        }
    }
    fs::write(path, bytes).unwrap();
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    assert_eq!(code(&fdflow(&[])), 1);
    assert_eq!(code(&fdflow(&["no-such-command"])), 1);
    assert_eq!(code(&fdflow(&["eval", "--no-such-flag"])), 1);
    assert_eq!(code(&fdflow(&["--help"])), 0);
    assert_eq!(code(&fdflow(&["--version"])), 0);
}

#[test]
fn runtime_errors_exit_2_with_a_message() {
    let out = fdflow(&["params", "--variant", "bogus"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).starts_with("error:"), "stderr: {}", stderr(&out));

    // Mutually exclusive model sources.
    let out = fdflow(&["eval", "--ckpt", "x.ckpt", "--variant", "full", "--dataset", "synthetic:0:1:64"]);
    assert_eq!(code(&out), 2);

    // Unknown training option names are listed.
    let out = fdflow(&["train", "steppes=3"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("steppes"), "stderr: {}", stderr(&out));
}

#[test]
fn params_reports_the_full_model_total() {
    let out = fdflow(&["params", "--variant", "full"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("total=6791830"), "stdout: {text}");
    assert!(text.contains("total_m=6.79"), "stdout: {text}");
}

#[test]
fn train_eval_infer_viz_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = fdflow(&[
        "train",
        "steps=3",
        "batch=1",
        "dataset=synthetic:5:2:64",
        "holdout=synthetic:6:2:64",
        "log_every=1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let log = fs::read_to_string(out_dir.join("train.log")).unwrap();
    assert!(log.contains("done steps=3"), "log: {log}");
    let ckpt = out_dir.join("model.ckpt");
    assert!(ckpt.exists());

    // Evaluate the checkpoint on a held-out set.
    let out = fdflow(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--dataset",
        "synthetic:6:2:64",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let eval_text = stdout(&out);
    let epe_moving = scrape(&eval_text, "epe");
    assert!(epe_moving.is_finite() && epe_moving > 0.0, "eval: {eval_text}");
    let fl = scrape(&eval_text, "fl_all");
    assert!((0.0..=100.0).contains(&fl), "eval: {eval_text}");

    // Identical frames: mean |flow| should undercut the EPE on moving data.
    let frame = dir.path().join("frame.ppm");
    write_ppm(&frame, 64, 64, |x, y| {
        let v = ((x * 3 + y * 5) % 251) as u8;
        [v, v.wrapping_add(40), v.wrapping_add(90)]
    });
    let flo = dir.path().join("out.flo");
    let viz = dir.path().join("flow.ppm");
    let out = fdflow(&[
        "infer",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--frame1",
        frame.to_str().unwrap(),
        "--frame2",
        frame.to_str().unwrap(),
        "--out",
        flo.to_str().unwrap(),
        "--viz",
        viz.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let infer_text = stdout(&out);
    assert!(infer_text.contains("size=64x64"), "infer: {infer_text}");
    let mean_flow = scrape(&infer_text, "mean_flow");
    assert!(
        mean_flow < epe_moving,
        "static-scene mean flow {mean_flow} vs moving EPE {epe_moving}"
    );

    // The written .flo re-renders through the standalone viz command.
    assert!(viz.exists());
    let viz2 = dir.path().join("flow2.ppm");
    let out = fdflow(&["viz", "--flow", flo.to_str().unwrap(), "--out", viz2.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert_eq!(fs::read(&viz).unwrap(), fs::read(&viz2).unwrap());
}

#[test]
fn zero_steps_written_checkpoint_is_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("init");
    let out = fdflow(&[
        "train",
        "--steps",
        "0",
        "batch=1",
        "dataset=synthetic:5:1:64",
        "holdout=synthetic:6:1:64",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("done steps=0"));
    let out = fdflow(&[
        "eval",
        "--ckpt",
        out_dir.join("model.ckpt").to_str().unwrap(),
        "--dataset",
        "synthetic:6:1:64",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
}

#[test]
fn frame_size_mismatch_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    assert_eq!(
        code(&fdflow(&[
            "train",
            "--steps",
            "0",
            "dataset=synthetic:5:1:64",
            "holdout=synthetic:6:1:64",
            "--out",
            out_dir.to_str().unwrap(),
        ])),
        0
    );
    let a = dir.path().join("a.ppm");
    let b = dir.path().join("b.ppm");
    write_ppm(&a, 64, 64, |_, _| [10, 20, 30]);
    write_ppm(&b, 128, 64, |_, _| [10, 20, 30]);
    let out = fdflow(&[
        "infer",
        "--ckpt",
        out_dir.join("model.ckpt").to_str().unwrap(),
        "--frame1",
        a.to_str().unwrap(),
        "--frame2",
        b.to_str().unwrap(),
        "--out",
        dir.path().join("x.flo").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).starts_with("error:"), "stderr: {}", stderr(&out));
}

#[test]
fn viz_renders_zero_flow_as_white() {
    let dir = tempfile::tempdir().unwrap();
    let flo = dir.path().join("zero.flo");
    let mut bytes = Vec::new();
    bytes.extend_from_slice(b"PIEH");
    bytes.extend_from_slice(&4i32.to_le_bytes());
    bytes.extend_from_slice(&3i32.to_le_bytes());
    bytes.extend_from_slice(&[0u8; 4 * 3 * 2 * 4]);
    fs::write(&flo, bytes).unwrap();
    let ppm = dir.path().join("zero.ppm");
    let out = fdflow(&["viz", "--flow", flo.to_str().unwrap(), "--out", ppm.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let data = fs::read(&ppm).unwrap();
    let header_end = data.windows(4).position(|w| w == b"255\n").unwrap() + 4;
    assert!(data[header_end..].iter().all(|&b| b == 255));
}

#[test]
fn same_seed_single_threaded_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = fdflow(&[
            "--threads",
            "1",
            "train",
            "steps=2",
            "batch=1",
            "seed=9",
            "dataset=synthetic:5:2:64",
            "holdout=synthetic:6:1:64",
            "log_every=1",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
        (
            fs::read(out_dir.join("train.log")).unwrap(),
            fs::read(out_dir.join("model.ckpt")).unwrap(),
        )
    };
    let (log_a, ckpt_a) = run("a");
    let (log_b, ckpt_b) = run("b");
    assert_eq!(log_a, log_b, "training logs differ between identical runs");
    assert_eq!(ckpt_a, ckpt_b, "checkpoints differ between identical runs");
}
