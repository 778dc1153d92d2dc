//! End-to-end tests of the `istar` binary: every subcommand, the exit-code
//! contract, and the resume/determinism behavior of the training driver.

use std::path::Path;
use std::process::{Command, Output};

use istar_core::data::{load_png, save_png};
use istar_core::Tensor;

fn istar(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_istar"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn istar")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn assert_code(out: &Output, want: i32) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "stdout:\n{}\nstderr:\n{}",
        stdout(out),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn solve_identity_problem_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let problem = "3 3\n1 0 0\n0 1 0\n0 0 1\n0.9 -0.1 0.3\n0.2\n";
    std::fs::write(dir.path().join("p.txt"), problem).unwrap();
    let out = istar(
        &["ista-solve", "p.txt", "--alpha", "1.0", "--trace-out", "trace.csv"],
        dir.path(),
    );
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("converged = true"), "{text}");
    assert!(text.contains("fixed point = true"), "{text}");
    // T_0.2(y) = [0.7, 0, 0.1]
    let sol_line = text.lines().find(|l| l.starts_with("solution =")).unwrap();
    let values: Vec<f64> = sol_line
        .trim_start_matches("solution =")
        .split_whitespace()
        .map(|v| v.parse().unwrap())
        .collect();
    assert!((values[0] - 0.7).abs() < 1e-9);
    assert_eq!(values[1], 0.0);
    assert!((values[2] - 0.1).abs() < 1e-9);

    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("iter,objective,residual\n"));
    assert!(dir.path().join("trace.cfg").exists());
}

#[test]
fn solve_lambda_zero_matches_direct_solve() {
    let dir = tempfile::tempdir().unwrap();
    // well-conditioned 3x3 system
    let problem = "3 3\n4 1 0\n1 3 1\n0 1 2\n1 2 3\n0.7\n";
    std::fs::write(dir.path().join("p.txt"), problem).unwrap();
    let out = istar(
        &["ista-solve", "p.txt", "--lambda", "0", "--tol", "1e-15", "--max-iters", "20000"],
        dir.path(),
    );
    assert_code(&out, 0);
    // direct solve of the system by substitution:
    // 4a + b = 1; a + 3b + c = 2; b + 2c = 3
    // b = 1 - 4a, c = 1 + 2a, so -9a + 4 = 2 => a = 2/9, b = 1/9, c = 13/9
    let text = stdout(&out);
    let sol_line = text.lines().find(|l| l.starts_with("solution =")).unwrap();
    let values: Vec<f64> = sol_line
        .trim_start_matches("solution =")
        .split_whitespace()
        .map(|v| v.parse().unwrap())
        .collect();
    assert!((values[0] - 2.0 / 9.0).abs() < 1e-6, "{values:?}");
    assert!((values[1] - 1.0 / 9.0).abs() < 1e-6);
    assert!((values[2] - 13.0 / 9.0).abs() < 1e-6);
}

#[test]
fn solve_missing_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = istar(&["ista-solve", "nope.txt"], dir.path());
    assert_code(&out, 2);
    assert!(!out.stderr.is_empty());
}

#[test]
fn solve_malformed_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.txt"), "2 2\n1 2\n").unwrap();
    let out = istar(&["ista-solve", "bad.txt"], dir.path());
    assert_code(&out, 2);
}

#[test]
fn params_reports_frozen_total_and_k_monotonicity() {
    let dir = tempfile::tempdir().unwrap();
    let out = istar(&["params"], dir.path());
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("total parameters = 5644316"), "{text}");
    assert!(text.contains("reference 5.05 M"), "{text}");

    let total_of = |iters: &str| -> u64 {
        let out = istar(&["params", "--iterations", iters], dir.path());
        assert_code(&out, 0);
        stdout(&out)
            .lines()
            .find(|l| l.starts_with("total parameters = "))
            .unwrap()
            .trim_start_matches("total parameters = ")
            .parse()
            .unwrap()
    };
    assert!(total_of("4") < total_of("16"));
}

#[test]
fn params_mac_formula_single_case() {
    let dir = tempfile::tempdir().unwrap();
    let out = istar(
        &["params", "--iterations", "1", "--channels", "8", "--height", "10", "--width", "10"],
        dir.path(),
    );
    assert_code(&out, 0);
    assert!(stdout(&out).contains("mac estimate at 10x10"));
}

#[test]
fn gradcheck_sampled_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = istar(
        &["gradcheck", "--size", "6", "--samples", "2", "--seed", "3"],
        dir.path(),
    );
    assert_code(&out, 0);
    assert!(stdout(&out).contains("PASS"), "{}", stdout(&out));
}

#[test]
fn make_dataset_writes_corpus_and_cache() {
    let dir = tempfile::tempdir().unwrap();
    let out = istar(
        &["make-dataset", "--out", "data", "--count", "4", "--seed", "1", "--cache-lr", "2"],
        dir.path(),
    );
    assert_code(&out, 0);
    for i in 0..4 {
        assert!(dir.path().join(format!("data/HR/img_{i:02}.png")).exists());
        assert!(dir.path().join(format!("data/LRx2/img_{i:02}.png")).exists());
    }
}

fn tiny_train_args<'a>(out_dir: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "train",
        "--data",
        "data",
        "--out-dir",
        out_dir,
        "--set",
        "model.channels=4",
        "--set",
        "model.iterations=1",
        "--set",
        "train.steps_per_epoch=6",
        "--set",
        "train.epochs=1",
        "--set",
        "train.batch=1",
        "--set",
        "train.patch=8",
        "--set",
        "train.lr0=1e-3",
        "--seed",
        "5",
    ];
    args.extend_from_slice(extra);
    args
}

#[test]
fn train_eval_infer_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    assert_code(
        &istar(&["make-dataset", "--out", "data", "--count", "3", "--seed", "2"], dir.path()),
        0,
    );

    // train a tiny model
    let out = istar(&tiny_train_args("run", &[]), dir.path());
    assert_code(&out, 0);
    assert!(dir.path().join("run/resolved.cfg").exists());
    assert!(dir.path().join("run/loss_log.csv").exists());
    let ckpt = dir.path().join("run/model_final.ckpt");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(dir.path().join("run/loss_log.csv")).unwrap();
    assert!(log.starts_with("step,epoch,lr,loss\n"));
    assert_eq!(log.trim().lines().count(), 7);

    // evaluate it with the baseline
    let out = istar(
        &["eval", "--ckpt", "run/model_final.ckpt", "--data", "data", "--baseline", "--out", "eval.csv"],
        dir.path(),
    );
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("bicubic baseline"), "{text}");
    assert!(text.contains("mean Y-PSNR delta"), "{text}");
    assert!(dir.path().join("eval.csv").exists());

    // a declared scale that disagrees with the checkpoint is exit 3
    let out = istar(
        &["eval", "--ckpt", "run/model_final.ckpt", "--data", "data", "--scale", "3"],
        dir.path(),
    );
    assert_code(&out, 3);

    // infer a 12x16 input to a 24x32 PNG
    let lr = Tensor::from_vec(
        &[3, 12, 16],
        (0..3 * 12 * 16).map(|i| (i % 97) as f32 / 96.0).collect(),
    )
    .unwrap();
    save_png(&lr, &dir.path().join("in.png")).unwrap();
    let out = istar(
        &[
            "infer",
            "--ckpt",
            "run/model_final.ckpt",
            "--input",
            "in.png",
            "--output",
            "out.png",
            "--side-by-side",
            "sheet.png",
        ],
        dir.path(),
    );
    assert_code(&out, 0);
    let sr = load_png(&dir.path().join("out.png")).unwrap();
    assert_eq!(sr.shape(), &[3, 24, 32]);
    let sheet = load_png(&dir.path().join("sheet.png")).unwrap();
    assert_eq!(sheet.shape()[1], 24);
    assert!(sheet.shape()[2] > 2 * 32);

    // mismatched ground truth for the sheet is a shape error (exit 2)
    save_png(&lr, &dir.path().join("wrong_hr.png")).unwrap();
    let out = istar(
        &[
            "infer",
            "--ckpt",
            "run/model_final.ckpt",
            "--input",
            "in.png",
            "--output",
            "out2.png",
            "--side-by-side",
            "sheet2.png",
            "--hr",
            "wrong_hr.png",
        ],
        dir.path(),
    );
    assert_code(&out, 2);
}

#[test]
fn resume_reproduces_unbroken_log() {
    let dir = tempfile::tempdir().unwrap();
    assert_code(
        &istar(&["make-dataset", "--out", "data", "--count", "2", "--seed", "3"], dir.path()),
        0,
    );
    // unbroken 6-step run with a checkpoint at step 3
    let out = istar(
        &tiny_train_args("full", &["--set", "train.ckpt_every=3"]),
        dir.path(),
    );
    assert_code(&out, 0);
    // resume from the mid-run checkpoint
    let out = istar(
        &tiny_train_args("resumed", &["--resume", "full/ckpt_000003.ckpt"]),
        dir.path(),
    );
    assert_code(&out, 0);

    let full_log = std::fs::read_to_string(dir.path().join("full/loss_log.csv")).unwrap();
    let resumed_log = std::fs::read_to_string(dir.path().join("resumed/loss_log.csv")).unwrap();
    let tail: Vec<&str> = full_log.trim().lines().skip(4).collect(); // header + steps 1..3
    let cont: Vec<&str> = resumed_log.trim().lines().skip(1).collect();
    assert_eq!(tail, cont, "resumed log must continue bit-identically");

    // resuming under a different architecture is exit 3
    let out = istar(
        &[
            "train",
            "--data",
            "data",
            "--out-dir",
            "bad",
            "--set",
            "model.channels=8",
            "--set",
            "model.iterations=1",
            "--resume",
            "full/ckpt_000003.ckpt",
        ],
        dir.path(),
    );
    assert_code(&out, 3);
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = istar(
        &["train", "--data", "x", "--set", "train.learning=1"],
        dir.path(),
    );
    assert_code(&out, 2);
    // and in a config file
    std::fs::write(dir.path().join("bad.cfg"), "train.sped=3\n").unwrap();
    let out = istar(&["train", "--config", "bad.cfg", "--data", "x"], dir.path());
    assert_code(&out, 2);
}

#[test]
fn commands_do_not_mutate_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let problem = "2 2\n1 0\n0 1\n0.5 0.25\n0.1\n";
    std::fs::write(dir.path().join("p.txt"), problem).unwrap();
    let before = std::fs::read(dir.path().join("p.txt")).unwrap();
    assert_code(&istar(&["ista-solve", "p.txt"], dir.path()), 0);
    assert_eq!(before, std::fs::read(dir.path().join("p.txt")).unwrap());
}
