use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gda_bench::RunConfig;

fn reference_text() -> String {
    fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/reference.toml")).unwrap()
}

/// The reference config shrunk to a few seconds of work.
fn tiny_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml(&reference_text()).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg.shift.train_per_class = 6;
    cfg.shift.test_per_class = 3;
    cfg.shift.n_per_shift = 2;
    cfg.nets.denoiser_train.epochs = 1;
    cfg.nets.classifier_train.epochs = 1;
    cfg.nets.encoder_train.epochs = 1;
    cfg.guidance.aug_count = 2;
    cfg.bench.sweep_per_shift = 1;
    cfg.bench.calibration_samples = 2;
    cfg.bench.timing_samples = 2;
    cfg.bench.aug_sweep = vec![0, 2];
    cfg.bench.step_sweep = vec![1, 10];
    cfg
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

fn gda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gda")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn run_ok(args: &[&str]) -> Output {
    let o = gda(args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn missing_config_key_exits_1_without_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let text = tiny_config(&out).to_toml().replace("temperature = 0.1\n", "");
    let cfg = write_config(dir.path(), &text);
    let o = gda(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(!out.join("checkpoints").exists());
}

#[test]
fn missing_config_file_and_bad_usage_exit_1() {
    assert_eq!(code(&gda(&["gen-data", "--config", "/nonexistent/config.toml"])), 1);
    assert_eq!(code(&gda(&["adapt", "--config"])), 1);
    assert_eq!(code(&gda(&["frobnicate"])), 1);
    assert_eq!(code(&gda(&["--help"])), 0);
}

#[test]
fn missing_artifacts_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &tiny_config(&out).to_toml());
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&gda(&["train", "--config", c])), 2);
    run_ok(&["gen-data", "--config", c]);
    assert_eq!(code(&gda(&["adapt", "--config", c, "--method", "gda"])), 2);
    assert_eq!(code(&gda(&["entropy-report", "--config", c])), 2);
}

#[test]
fn unknown_method_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(&dir.path().join("run")).to_toml());
    let o = gda(&["adapt", "--config", cfg.to_str().unwrap(), "--method", "tent"]);
    assert_eq!(code(&o), 1);
}

fn pipeline(cfg: &Path, out: &Path, seed: &str) -> Vec<u8> {
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    run_ok(&["gen-data", "--config", c, "--out", o, "--seed", seed]);
    run_ok(&["train", "--config", c, "--out", o, "--seed", seed]);
    run_ok(&["adapt", "--config", c, "--out", o, "--seed", seed, "--method", "gda"]);
    fs::read(out.join("results/adapt_gda.csv")).unwrap()
}

#[test]
fn tiny_pipeline_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(&dir.path().join("unused")).to_toml());
    let a = pipeline(&cfg, &dir.path().join("a"), "11");
    let b = pipeline(&cfg, &dir.path().join("b"), "11");
    let c = pipeline(&cfg, &dir.path().join("c"), "12");
    assert_eq!(a, b);
    assert_ne!(a, c);
    let header = String::from_utf8_lossy(&a).lines().next().unwrap().to_string();
    assert!(header.starts_with("sample_id,clean_id,family,severity,label,method,prediction,correct"));
    let resolved = fs::read_to_string(dir.path().join("a/resolved_config.toml")).unwrap();
    assert!(resolved.contains("master_seed = 11"));
}

#[test]
fn every_subcommand_runs_on_a_tiny_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &tiny_config(&out).to_toml());
    let c = cfg.to_str().unwrap();
    run_ok(&["gen-data", "--config", c]);
    run_ok(&["train", "--config", c]);
    for m in ["standard", "diffpure", "dda", "gda_no_marginal", "gda"] {
        run_ok(&["adapt", "--config", c, "--method", m]);
    }
    let steps = run_ok(&["sweep-steps", "--config", c]);
    assert_eq!(String::from_utf8_lossy(&steps.stdout).lines().count(), 1 + 1 + 2 * 2);
    let augs = run_ok(&["sweep-augs", "--config", c]);
    assert!(String::from_utf8_lossy(&augs.stderr).contains("matches gda_no_marginal: true"));
    run_ok(&["entropy-report", "--config", c]);
    run_ok(&["timing", "--config", c]);
    run_ok(&["severity-report", "--config", c, "--samples", "4"]);
    for f in [
        "sweep_steps.csv",
        "sweep_augs.csv",
        "entropy_hist.csv",
        "entropy_medians.csv",
        "timing.csv",
        "severity_report.csv",
        "calibration.toml",
    ] {
        assert!(out.join("results").join(f).exists(), "{f}");
    }
    assert!(out.join("audit/gaussian_noise.pgm").exists());
}
