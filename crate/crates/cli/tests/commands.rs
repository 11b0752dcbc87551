use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn anprompt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anprompt"))
        .current_dir(dir)
        .env("ANPROMPT_DETERMINISTIC", "1")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = anprompt(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn train_eval_noise_bench_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = fixture();
    let cfg = cfg.to_str().unwrap();

    let trained = ok(d, &["--config", cfg, "--out", "r", "train"]);
    assert_eq!(trained.lines().filter(|l| l.starts_with("seed")).count(), 2);
    for s in ["seed_0", "seed_1"] {
        for f in ["config.toml", "checkpoint.json", "init_checkpoint.json", "train_log.jsonl", "metrics.jsonl"] {
            assert!(d.join("r").join(s).join(f).is_file(), "{s}/{f}");
        }
    }
    // re-evaluating the saved checkpoint reproduces the training-time report
    let evaluated = ok(d, &["--config", cfg, "--out", "r", "eval"]);
    assert_eq!(trained, evaluated);

    let bench = ok(d, &["--config", cfg, "--out", "r", "--seed", "0", "noise-bench"]);
    assert_eq!(bench.lines().count(), 5);
    assert!(d.join("r/noise_bench.csv").is_file());
    assert!(d.join("r/seed_0/metrics_noise.png").is_file());

    let plotted = ok(d, &["--out", "plots", "plot", "r/seed_1/train_log.jsonl"]);
    assert_eq!(plotted.trim(), Path::new("plots").join("train_log_loss.png").to_str().unwrap());
    assert!(d.join("plots/train_log_loss.png").is_file());
}

#[test]
fn seed_flag_restricts_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture();
    ok(tmp.path(), &["train", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", "r"]);
    assert!(tmp.path().join("r/seed_7/checkpoint.json").is_file());
    assert!(!tmp.path().join("r/seed_0").exists());
}

#[test]
fn ablate_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture();
    let out = ok(
        tmp.path(),
        &["--config", cfg.to_str().unwrap(), "--seed", "0", "--out", "a", "ablate", "--study", "theta_sweep"],
    );
    assert!(out.contains("| variant | Base | Novel | HM |"));
    for ext in ["jsonl", "csv", "md"] {
        assert!(tmp.path().join(format!("a/ablation_theta_sweep.{ext}")).is_file());
    }
    let csv = std::fs::read_to_string(tmp.path().join("a/ablation_theta_sweep.csv")).unwrap();
    let jsonl = std::fs::read_to_string(tmp.path().join("a/ablation_theta_sweep.jsonl")).unwrap();
    assert_eq!(csv.lines().count(), jsonl.lines().count() + 1);
}

#[test]
fn frozen_noise_bench_needs_no_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture();
    let out = ok(
        tmp.path(),
        &["--config", cfg.to_str().unwrap(), "--seed", "3", "--out", "n", "noise-bench", "--frozen"],
    );
    assert!(out.contains("weak_fusion"));
    assert!(tmp.path().join("n/seed_3/metrics.jsonl").is_file());
}

#[test]
fn synth_data_exports_images_and_captions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture();
    ok(tmp.path(), &["--config", cfg.to_str().unwrap(), "--out", "data", "synth-data"]);
    let data = tmp.path().join("data");
    assert!(data.join("captions.json").is_file());
    let classes = std::fs::read_dir(data.join("train")).unwrap().count();
    assert_eq!(classes, 4);
    let pngs = std::fs::read_dir(data.join("test"))
        .unwrap()
        .map(|c| std::fs::read_dir(c.unwrap().path()).unwrap().count())
        .sum::<usize>();
    assert_eq!(pngs, 16);
}

#[test]
fn malformed_config_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[optim]\nbatch_size = \"four\"\n").unwrap();
    let out = anprompt(tmp.path(), &["--config", bad.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("optim.batch_size"), "{err}");
    assert!(!err.contains("panicked"));

    std::fs::write(&bad, "[optim]\nbatch_size = 0\n").unwrap();
    let out = anprompt(tmp.path(), &["--config", bad.to_str().unwrap(), "eval"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("optim.batch_size"));

    std::fs::write(&bad, "[optim]\nbatch_sise = 4\n").unwrap();
    let out = anprompt(tmp.path(), &["--config", bad.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("batch_sise"));
}

#[test]
fn missing_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture();
    let cfg = cfg.to_str().unwrap();
    let out = anprompt(tmp.path(), &["--config", cfg, "--out", "none", "eval"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("checkpoint"));
    let out = anprompt(tmp.path(), &["--config", "absent.toml", "train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("absent.toml"));
    let out = anprompt(tmp.path(), &["plot", "absent.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!stderr(&out).contains("panicked"));
}

#[test]
fn usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &["ablate", "--study", "nope"][..],
        &["ablate"],
        &["plot"],
        &["frobnicate"],
        &["train", "--seed", "x"],
    ] {
        let out = anprompt(tmp.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
    let out = anprompt(tmp.path(), &["ablate", "--study", "nope"]);
    assert!(stderr(&out).contains("components"));
}
