use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clover_core::archive::{encode, factors_from_archive, read_archive, weights_from_archive, write_archive, Archive};
use clover_core::attention::{random_weights, SynthOptions};
use clover_core::transform::{decompose_factors, prune_factors, spectrum_report};
use clover_core::{DecomposeMode, Dims, Rng};

fn clover(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clover"))
        .args(args)
        .output()
        .expect("spawn clover")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) -> PathBuf {
    let w = p(dir, "w.clv");
    let mut args = vec!["gen", s(&w), "--D", "16", "--h", "2", "--d", "4", "--seed", "7"];
    args.extend_from_slice(extra);
    let out = clover(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    w
}

#[test]
fn gen_transform_verify_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let w = gen(dir.path(), &["--bias"]);
    let f = p(dir.path(), "f.clv");
    assert_eq!(code(&clover(&["transform", s(&w), s(&f), "--mode", "svd"])), 0);
    for mask in ["none", "causal", "window:3"] {
        let out = clover(&["verify", s(&w), s(&f), "--tol", "1e-10", "--mask", mask]);
        assert_eq!(code(&out), 0, "{}", stdout(&out));
        assert!(stdout(&out).contains("seed 24301"));
    }
}

#[test]
fn qr_mode_with_rope_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let w = gen(dir.path(), &[]);
    let f = p(dir.path(), "f.clv");
    assert_eq!(code(&clover(&["transform", s(&w), s(&f), "--mode", "qr"])), 0);
    let out = clover(&["verify", s(&w), s(&f), "--rope", "--mask", "causal", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("seed 3"));
}

#[test]
fn perturbed_factors_fail_verification() {
    let dir = tempfile::tempdir().unwrap();
    let w = gen(dir.path(), &[]);
    let f = p(dir.path(), "f.clv");
    assert_eq!(code(&clover(&["transform", s(&w), s(&f)])), 0);
    let mut a = read_archive(&f).unwrap();
    let mut factors = factors_from_archive(&a).unwrap();
    factors.vo[0].s[0] += 1e-3;
    a = Archive::try_from(&factors).unwrap();
    write_archive(&f, &a).unwrap();
    let out = clover(&["verify", s(&w), s(&f), "--tol", "1e-10"]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("NOT equivalent"));
}

#[test]
fn count_params_lora_and_clover() {
    let out = clover(&[
        "count-params",
        "--D",
        "4096",
        "--h",
        "32",
        "--d",
        "128",
        "--method",
        "lora:64",
    ]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("trainable  1572864"), "{}", stdout(&out));
    let out = clover(&[
        "count-params",
        "--D",
        "4096",
        "--h",
        "32",
        "--d",
        "128",
        "--method",
        "clover",
    ]);
    assert!(stdout(&out).contains("trainable  1052672"), "{}", stdout(&out));
    assert!(stdout(&out).contains("1576960"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&clover(&[])), 2);
    assert_eq!(code(&clover(&["verify", "--bogus"])), 2);
    assert_eq!(
        code(&clover(&[
            "count-params",
            "--D",
            "8",
            "--h",
            "1",
            "--d",
            "2",
            "--method",
            "nope"
        ])),
        2
    );
    assert_eq!(code(&clover(&["transform", "a", "b", "--mode", "eig"])), 2);
    assert_eq!(code(&clover(&["--help"])), 0);
}

#[test]
fn operation_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = p(dir.path(), "missing.clv");
    let out = clover(&["inspect", s(&missing)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.clv"));

    let garbage = p(dir.path(), "garbage.clv");
    std::fs::write(&garbage, b"not an archive").unwrap();
    assert_eq!(code(&clover(&["inspect", s(&garbage)])), 1);

    // qr mode cannot absorb Q/K biases.
    let w = gen(dir.path(), &["--bias"]);
    let f = p(dir.path(), "f.clv");
    assert_eq!(code(&clover(&["transform", s(&w), s(&f), "--mode", "qr"])), 1);
    assert!(!f.exists());
}

#[test]
fn transform_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let w_path = gen(dir.path(), &["--heads-rank", "2", "--noise", "1e-4"]);
    let w = random_weights(
        Dims::new(16, 2, 4),
        &SynthOptions {
            head_rank: Some(2),
            bias: false,
            noise: 1e-4,
        },
        &mut Rng::new(7),
    )
    .unwrap();
    assert_eq!(std::fs::read(&w_path).unwrap(), encode(&Archive::from(&w)).unwrap());

    let f_path = p(dir.path(), "f.clv");
    assert_eq!(
        code(&clover(&["transform", s(&w_path), s(&f_path), "--mode", "svd"])),
        0
    );
    let f = decompose_factors(&w, DecomposeMode::SvdBoth).unwrap();
    let on_disk = read_archive(&f_path).unwrap();
    assert_eq!(factors_from_archive(&on_disk).unwrap(), f);

    let pruned_path = p(dir.path(), "p.clv");
    let csv_path = p(dir.path(), "p.csv");
    let out = clover(&[
        "prune",
        s(&f_path),
        s(&pruned_path),
        "--threshold-qk",
        "1e-2",
        "--threshold-vo",
        "1e-2",
        "--csv",
        s(&csv_path),
    ]);
    assert_eq!(code(&out), 0);
    let (pruned, stats) = prune_factors(&f, 1e-2, 1e-2).unwrap();
    let mut csv = Vec::new();
    stats.write_csv(0, &mut csv).unwrap();
    assert_eq!(std::fs::read(&csv_path).unwrap(), csv);
    assert_eq!(
        std::fs::read(&pruned_path).unwrap(),
        encode(&Archive::try_from(&pruned).unwrap()).unwrap()
    );
    assert!(stdout(&out).contains(&stats.table()));

    let spec_path = p(dir.path(), "s.csv");
    assert_eq!(code(&clover(&["spectrum", s(&w_path), "--csv", s(&spec_path)])), 0);
    let mut csv = Vec::new();
    spectrum_report(&w, 0).unwrap().write_csv(&mut csv).unwrap();
    assert_eq!(std::fs::read(&spec_path).unwrap(), csv);
}

#[test]
fn train_then_merge_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let w = gen(dir.path(), &[]);
    let f = p(dir.path(), "f.clv");
    assert_eq!(code(&clover(&["transform", s(&w), s(&f)])), 0);
    let state = p(dir.path(), "state.clv");
    let losses = p(dir.path(), "loss.csv");
    let out = clover(&[
        "train-toy",
        s(&f),
        "--task",
        "regress",
        "--steps",
        "50",
        "--out",
        s(&state),
        "--loss-csv",
        s(&losses),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&losses).unwrap();
    assert!(csv.starts_with("step,loss,grad_norm\n"));
    assert_eq!(csv.lines().count(), 52);

    let merged = p(dir.path(), "merged.clv");
    assert_eq!(code(&clover(&["merge", s(&state), s(&merged)])), 0);
    assert!(weights_from_archive(&read_archive(&merged).unwrap()).is_ok());
    let out = clover(&["verify", s(&merged), s(&state), "--mask", "causal"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));

    let out = clover(&["inspect", s(&state)]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("train-state"));

    let recall_state = p(dir.path(), "recall.clv");
    let out = clover(&[
        "train-toy",
        s(&f),
        "--task",
        "recall",
        "--steps",
        "5",
        "--out",
        s(&recall_state),
        "--loss-csv",
        s(&losses),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}
