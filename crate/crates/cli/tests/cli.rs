//! End-to-end checks of the binary: command wiring, exit codes, and
//! byte-level determinism of re-run commands.

use std::fs;
use std::path::Path;
use std::process::Command;

fn umfl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_umfl"))
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.conf");
    fs::write(
        &path,
        "synth.num_identities = 9\n\
         synth.samples_per_identity = 4\n\
         synth.height = 16\n\
         synth.width = 8\n\
         pk.p = 2\n\
         pk.k = 2\n\
         model.embedding_dim = 8\n\
         train.epochs = 1\n\
         train.steps_per_epoch = 2\n\
         split.query_per_identity = 1\n\
         eval.occlusion_stripes = 4\n",
    )
    .unwrap();
    path
}

#[test]
fn gen_data_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    for out in ["a", "b"] {
        let status = umfl()
            .args(["gen-data", "--config"])
            .arg(&cfg)
            .args(["--seed", "7", "--out"])
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let ma = fs::read(dir.path().join("a/manifest.csv")).unwrap();
    let mb = fs::read(dir.path().join("b/manifest.csv")).unwrap();
    assert_eq!(ma, mb);
    for entry in fs::read_dir(dir.path().join("a/images")).unwrap() {
        let name = entry.unwrap().file_name();
        let pa = fs::read(dir.path().join("a/images").join(&name)).unwrap();
        let pb = fs::read(dir.path().join("b/images").join(&name)).unwrap();
        assert_eq!(pa, pb, "pixel data differs for {name:?}");
    }
}

#[test]
fn train_eval_attribution_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    for out in ["r1", "r2"] {
        let status = umfl()
            .args(["train", "--config"])
            .arg(&cfg)
            .args(["--seed", "3", "--out"])
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
    }
    for file in ["metrics.csv", "epoch_eval.csv", "eval_report.csv", "checkpoint.umfl"] {
        let a = fs::read(dir.path().join("r1").join(file)).unwrap();
        let b = fs::read(dir.path().join("r2").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }

    // Eval the checkpoint through the CLI and compare with train's report.
    let status = umfl()
        .args(["eval", "--config"])
        .arg(&cfg)
        .args(["--seed", "3", "--checkpoint"])
        .arg(dir.path().join("r1/checkpoint.umfl"))
        .arg("--out")
        .arg(dir.path().join("ev"))
        .status()
        .unwrap();
    assert!(status.success());
    let train_report = fs::read(dir.path().join("r1/eval_report.csv")).unwrap();
    let eval_report = fs::read(dir.path().join("ev/eval_report.csv")).unwrap();
    assert_eq!(train_report, eval_report);

    let status = umfl()
        .args(["attribution", "--config"])
        .arg(&cfg)
        .args(["--seed", "3", "--checkpoint"])
        .arg(dir.path().join("r1/checkpoint.umfl"))
        .arg("--out")
        .arg(dir.path().join("at"))
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("at/attribution.csv").exists());
}

#[test]
fn erase_demo_runs_in_both_modes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    for mode in ["re", "bce"] {
        let status = umfl()
            .args(["erase-demo", "--config"])
            .arg(&cfg)
            .args(["--seed", "1", "--mode", mode, "--out"])
            .arg(dir.path().join(mode))
            .status()
            .unwrap();
        assert!(status.success());
        assert!(dir.path().join(mode).join("regions.csv").exists());
    }
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "synth.num_parts = 1\n").unwrap();
    let output = umfl()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("num_parts"), "{stderr}");

    // Unknown key, bad seed, bad mode: all config errors.
    fs::write(&cfg, "unknown.key = 1\n").unwrap();
    let output = umfl()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("y"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));

    let output = umfl().args(["gen-data", "--seed", "zzz"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn hex_seed_equals_decimal_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    for (out, seed) in [("hex", "0x10"), ("dec", "16")] {
        let status = umfl()
            .args(["gen-data", "--config"])
            .arg(&cfg)
            .args(["--seed", seed, "--out"])
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = fs::read(dir.path().join("hex/manifest.csv")).unwrap();
    let b = fs::read(dir.path().join("dec/manifest.csv")).unwrap();
    assert_eq!(a, b);
    let pa = fs::read(dir.path().join("hex/images/00000.ppm")).unwrap();
    let pb = fs::read(dir.path().join("dec/images/00000.ppm")).unwrap();
    assert_eq!(pa, pb);
}

#[test]
fn missing_checkpoint_is_not_success() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let output = umfl()
        .args(["eval", "--config"])
        .arg(&cfg)
        .args(["--checkpoint", "/nonexistent/ckpt.umfl", "--out"])
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_ne!(output.status.code(), Some(0));
}
