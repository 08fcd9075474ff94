//! End-to-end runs of the installed binary.

use std::path::Path;
use std::process::{Command, Output};

fn efaprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_efaprune"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_on_separable_data_reaches_high_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let res = efaprune(&[
        "train",
        "--dataset",
        "separable-2d",
        "--model",
        "tiny-cnn",
        "--samples",
        "400",
        "--epochs",
        "5",
        "--batch-size",
        "32",
        "--lr",
        "0.05",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&res);
    let metrics = read_json(&out.join("metrics.json"));
    let acc = metrics["test_accuracy"].as_f64().unwrap();
    assert!(acc >= 0.99, "test accuracy {acc}");
    assert!(out.join("checkpoint.ckpt").exists());
}

#[test]
fn missing_data_dir_is_a_usage_error_naming_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let res = efaprune(&[
        "train",
        "--dataset",
        "mnist-idx",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("--data-dir"), "stderr: {stderr}");
}

#[test]
fn same_seed_twice_writes_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &Path| {
        let res = efaprune(&[
            "train",
            "--dataset",
            "synth-blobs",
            "--samples",
            "200",
            "--epochs",
            "2",
            "--batch-size",
            "32",
            "--lr",
            "0.05",
            "--seed",
            "11",
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_ok(&res);
        (
            std::fs::read(dir.join("metrics.json")).unwrap(),
            std::fs::read(dir.join("checkpoint.ckpt")).unwrap(),
        )
    };
    let (m1, c1) = run(&tmp.path().join("a"));
    let (m2, c2) = run(&tmp.path().join("b"));
    assert_eq!(m1, m2);
    assert_eq!(c1, c2);
}

#[test]
fn full_pipeline_produces_comparison_row() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("pipe");
    let o = out.to_str().unwrap();
    let base = &[
        "--dataset",
        "synth-blobs",
        "--samples",
        "600",
        "--epochs",
        "6",
        "--batch-size",
        "64",
        "--lr",
        "0.05",
        "--seed",
        "21",
        "--out",
        o,
    ];
    fn with<'a>(cmd: &[&'a str], base: &[&'a str]) -> Vec<&'a str> {
        let mut v = cmd.to_vec();
        v.extend_from_slice(base);
        v
    }

    assert_ok(&efaprune(&with(&["train"], base)));
    let ckpt = out.join("checkpoint.ckpt");
    assert_ok(&efaprune(&with(&[
        "analyze",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ], base)));
    assert_ok(&efaprune(&with(&[
        "prune",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ], base)));
    assert!(out.join("plan.json").exists());
    let arch = out.join("pruned_arch.json");
    assert!(arch.exists());
    assert_ok(&efaprune(&with(&[
        "retrain",
        "--arch",
        arch.to_str().unwrap(),
    ], base)));
    assert_ok(&efaprune(&with(&[
        "compare",
        "--baseline",
        ckpt.to_str().unwrap(),
        "--pruned",
        out.join("retrained.ckpt").to_str().unwrap(),
    ], base)));

    let cmp = read_json(&out.join("comparison.json"));
    assert!(cmp["parameters_pruned_ratio"].as_f64().unwrap() > 0.0);
    let plan = read_json(&out.join("plan.json"));
    assert!(plan["feasible"].as_bool().unwrap());

    // a model compared against itself shows zero pruned ratios and no
    // accuracy delta
    assert_ok(&efaprune(&with(&[
        "compare",
        "--baseline",
        ckpt.to_str().unwrap(),
        "--pruned",
        ckpt.to_str().unwrap(),
    ], base)));
    let same = read_json(&out.join("comparison.json"));
    assert_eq!(same["accuracy_delta"].as_f64().unwrap(), 0.0);
    assert_eq!(same["filters_pruned_ratio"].as_f64().unwrap(), 0.0);
    assert_eq!(same["parameters_pruned_ratio"].as_f64().unwrap(), 0.0);
    assert_eq!(same["flops_pruned_ratio"].as_f64().unwrap(), 0.0);
}

#[test]
fn analyze_rejects_mismatched_dataset_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("m");
    let o = out.to_str().unwrap();
    assert_ok(&efaprune(&[
        "train",
        "--dataset",
        "synth-blobs",
        "--samples",
        "200",
        "--epochs",
        "1",
        "--batch-size",
        "32",
        "--seed",
        "4",
        "--out",
        o,
    ]));
    // 16x16 single-channel checkpoint fed 2-channel 1x1 data
    let res = efaprune(&[
        "analyze",
        "--checkpoint",
        out.join("checkpoint.ckpt").to_str().unwrap(),
        "--dataset",
        "separable-2d",
        "--samples",
        "200",
        "--out",
        o,
    ]);
    assert!(!res.status.success());
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(
        stderr.contains("layer") && stderr.contains("rejected"),
        "stderr: {stderr}"
    );
}

#[test]
fn locked_output_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("locked");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".efaprune.lock"), b"").unwrap();
    let res = efaprune(&[
        "train",
        "--dataset",
        "separable-2d",
        "--samples",
        "100",
        "--epochs",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("locked"), "stderr: {stderr}");
}

#[test]
fn config_file_fields_are_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(
        &cfg,
        "dataset = \"separable-2d\"\nsamples = 150\nepochs = 1\nbatch_size = 32\nseed = 9\n",
    )
    .unwrap();
    let out = tmp.path().join("cfg-run");
    // the flag overrides the file's sample count; the file supplies the rest
    let res = efaprune(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--samples",
        "120",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&res);
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("120 samples"), "stderr: {stderr}");
}

#[test]
fn thread_cap_env_var_is_honored_and_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("threads");
    let res = Command::new(env!("CARGO_BIN_EXE_efaprune"))
        .env("EFAPRUNE_THREADS", "2")
        .args([
            "train",
            "--dataset",
            "separable-2d",
            "--samples",
            "100",
            "--epochs",
            "1",
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_ok(&res);

    let res = Command::new(env!("CARGO_BIN_EXE_efaprune"))
        .env("EFAPRUNE_THREADS", "zero")
        .args(["verify"])
        .output()
        .unwrap();
    assert!(!res.status.success());
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("EFAPRUNE_THREADS"), "stderr: {stderr}");
}

#[test]
fn verify_reports_all_suites_passing() {
    let res = efaprune(&["verify"]);
    assert_ok(&res);
    let stdout = String::from_utf8_lossy(&res.stdout);
    for suite in [
        "eigensolver-oracle",
        "finite-difference-gradients",
        "fisher-hessian-identity",
    ] {
        assert!(
            stdout.contains(&format!("verify {suite}: pass")),
            "stdout: {stdout}"
        );
    }
}
