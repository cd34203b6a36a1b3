//! End-to-end tests of the `dentage` binary: every subcommand, the exit-code
//! contract (0 success / 1 usage / 2 runtime), clobber protection, and
//! artifact determinism, all on a small synthetic dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn dentage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dentage"))
        .args(args)
        .output()
        .expect("binary spawns")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert_eq!(code(out), 0, "stderr: {}", stderr(out));
}

/// Shared fixture: a 12-image synthetic dataset, a fast experiment config,
/// and one completed training run.
struct Fixture {
    _dir: TempDir,
    manifest: PathBuf,
    config: PathBuf,
    train_out: PathBuf,
    first_image: PathBuf,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn write_config(path: &Path, manifest: &Path, out_dir: &Path) {
    let text = format!(
        r#"output_dir = "{out}"

[dataset]
manifest = "{manifest}"
train_count = 8
val_count = 2
test_count = 2
seed = 7

[model]
backbone = "mobilenet_v2"
cut_block_index = "full"
input_size = 48

[training]
max_epochs = 2
early_stop_patience = 2
plateau_patience = 1
batch_size = 4
seed = 7

[augmentation]
rotation_degrees = [-2.0, 2.0]
zoom_fraction = 0.05
shift_fraction_h = 0.05
shift_fraction_v = 0.05
brightness_range = [0.9, 1.1]
"#,
        out = out_dir.display(),
        manifest = manifest.display(),
    );
    std::fs::write(path, text).unwrap();
}

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data_dir = dir.path().join("data");
        let synth = dentage(&[
            "synth",
            "--out",
            data_dir.to_str().unwrap(),
            "--count",
            "12",
            "--seed",
            "5",
            "--size",
            "48",
        ]);
        assert_ok(&synth);
        let manifest = data_dir.join("manifest.csv");
        assert!(manifest.is_file());
        let first_image = data_dir.join("images").join("synth_0000.png");
        assert!(first_image.is_file());

        let config = dir.path().join("experiment.toml");
        let train_out = dir.path().join("run");
        write_config(&config, &manifest, &train_out);

        let train = dentage(&["train", "--config", config.to_str().unwrap()]);
        assert_ok(&train);

        Fixture { _dir: dir, manifest, config, train_out, first_image }
    })
}

#[test]
fn train_writes_expected_artifacts() {
    let fx = fixture();
    let history = fx.train_out.join("history.csv");
    assert!(history.is_file());
    let text = std::fs::read_to_string(&history).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,train_loss,val_loss,train_mae,val_mae,lr"
    );
    assert_eq!(lines.count(), 2, "one row per epoch");
    assert!(fx.train_out.join("curves.png").is_file());
    assert!(fx.train_out.join("checkpoint").join("model.safetensors").is_file());
    assert!(fx.train_out.join("checkpoint").join("model.json").is_file());

    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.train_out.join("run.json")).unwrap())
            .unwrap();
    assert_eq!(run["command"], "train");
    let hash = run["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));

    // The checkpoint sidecar carries the same hash.
    let meta: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(fx.train_out.join("checkpoint").join("model.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(meta["train_config_hash"].as_str().unwrap(), hash);
}

#[test]
fn train_is_deterministic_across_runs() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let out2 = dir.path().join("run2");
    let rerun = dentage(&[
        "train",
        "--config",
        fx.config.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert_ok(&rerun);
    assert_eq!(
        std::fs::read(fx.train_out.join("history.csv")).unwrap(),
        std::fs::read(out2.join("history.csv")).unwrap(),
        "same config + seed must reproduce the training history bit for bit"
    );
}

#[test]
fn refuses_to_clobber_without_overwrite() {
    let fx = fixture();
    let again = dentage(&["train", "--config", fx.config.to_str().unwrap()]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("already exists"), "stderr: {}", stderr(&again));
}

#[test]
fn evaluate_reports_metrics_and_predictions() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("eval");
    let eval = dentage(&[
        "evaluate",
        "--checkpoint",
        fx.train_out.join("checkpoint").to_str().unwrap(),
        "--manifest",
        fx.manifest.to_str().unwrap(),
        "--config",
        fx.config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&eval);

    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["n"], 2, "test split of the configured (8,2,2) partition");
    for key in ["mse", "rmse", "mae", "r2"] {
        assert!(metrics[key].as_f64().unwrap().is_finite(), "{key} finite");
    }
    assert_eq!(metrics["config_hash"].as_str().unwrap().len(), 64);

    let csv_text = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    let mut lines = csv_text.lines();
    assert_eq!(lines.next().unwrap(), "image_path,actual_age,predicted_age");
    assert_eq!(lines.count(), 2, "one row per test image");
    assert!(out.join("scatter.png").is_file());
}

#[test]
fn evaluate_perfect_stub_scores_r2_one_on_whole_manifest() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let stub_dir = dir.path().join("stub");
    dentage_core::save_perfect_stub(&stub_dir, "cafebabe").unwrap();

    let out = dir.path().join("eval");
    let eval = dentage(&[
        "evaluate",
        "--checkpoint",
        stub_dir.to_str().unwrap(),
        "--manifest",
        fx.manifest.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&eval);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["r2"].as_f64().unwrap(), 1.0);
    assert_eq!(metrics["mae"].as_f64().unwrap(), 0.0);
    assert_eq!(metrics["n"], 12, "no config: the whole manifest is evaluated");
}

#[test]
fn explain_writes_overlay_and_sidecar_deterministically() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    for out in [&a, &b] {
        let explain = dentage(&[
            "explain",
            "--checkpoint",
            fx.train_out.join("checkpoint").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            fx.first_image.to_str().unwrap(),
        ]);
        assert_ok(&explain);
        assert!(out.is_file());
    }
    assert_eq!(
        std::fs::read(&a).unwrap(),
        std::fs::read(&b).unwrap(),
        "same checkpoint + image must produce identical overlay bytes"
    );
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.with_extension("json")).unwrap()).unwrap();
    assert!(sidecar["predicted_age"].as_f64().unwrap().is_finite());
    assert_eq!(sidecar["target_layer"], "features");
}

#[test]
fn explain_missing_image_is_a_runtime_failure() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let explain = dentage(&[
        "explain",
        "--checkpoint",
        fx.train_out.join("checkpoint").to_str().unwrap(),
        "--out",
        dir.path().join("x.png").to_str().unwrap(),
        dir.path().join("absent.png").to_str().unwrap(),
    ]);
    assert_eq!(code(&explain), 2);
}

#[test]
fn dataset_report_summarizes_the_manifest() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("report");
    let report = dentage(&[
        "dataset-report",
        "--manifest",
        fx.manifest.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&report);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["count"], 12);
    let min = summary["min"].as_f64().unwrap();
    let max = summary["max"].as_f64().unwrap();
    let mean = summary["mean"].as_f64().unwrap();
    assert!(min >= 8.0 && max <= 68.0 && min <= mean && mean <= max);
    assert!(out.join("age_distribution.png").is_file());
}

#[test]
fn missing_manifest_is_a_usage_error_with_missing_file_message() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("c.toml");
    write_config(&config, &dir.path().join("nope.csv"), &dir.path().join("out"));
    let train = dentage(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&train), 1);
    assert!(
        stderr(&train).contains("not found"),
        "the missing-file error names the path: {}",
        stderr(&train)
    );
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("c.toml");
    std::fs::write(&config, "banana = 1\n").unwrap();
    let train = dentage(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&train), 1);
}

#[test]
fn sweep_with_no_models_is_a_usage_error() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let sweep = dentage(&[
        "sweep",
        "--config",
        fx.config.to_str().unwrap(),
        "--out",
        dir.path().join("sweep").to_str().unwrap(),
    ]);
    assert_eq!(code(&sweep), 1);
    assert!(stderr(&sweep).contains("no models"), "stderr: {}", stderr(&sweep));
}

#[test]
fn sweep_records_per_row_failure_and_continues() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sweep");
    let config = dir.path().join("sweep.toml");
    // One trainable entry plus one that cannot build at this input size
    // (the deep backbone needs at least 75 px).
    let text = format!(
        r#"output_dir = "{out}"

[dataset]
manifest = "{manifest}"
train_count = 8
val_count = 2
test_count = 2
seed = 7

[model]
backbone = "mobilenet_v2"
cut_block_index = "full"
input_size = 48

[training]
max_epochs = 1
early_stop_patience = 1
plateau_patience = 0
batch_size = 4
seed = 7

[augmentation]
rotation_degrees = [-2.0, 2.0]
zoom_fraction = 0.05
shift_fraction_h = 0.05
shift_fraction_v = 0.05
brightness_range = [0.9, 1.1]

[sweep]
models = ["mobilenet_v2", "inception_v3:4"]
"#,
        out = out.display(),
        manifest = fx.manifest.display(),
    );
    std::fs::write(&config, text).unwrap();

    let sweep = dentage(&["sweep", "--config", config.to_str().unwrap()]);
    assert_ok(&sweep);

    let csv_text = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = csv_text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "model,total_trainable_params,test_mae,test_rmse,test_r2"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    let good = rows.iter().find(|r| r.starts_with("MobileNetV2")).unwrap();
    assert!(!good.ends_with(",,,"), "successful row has metrics: {good}");
    let bad = rows.iter().find(|r| r.contains("inception_v3:4")).unwrap();
    assert!(bad.ends_with(",,,,"), "failed row has empty metric cells: {bad}");

    let md = std::fs::read_to_string(out.join("sweep.md")).unwrap();
    assert!(md.contains("Failed rows"));
    assert!(md.contains("parameter column"), "disambiguation note present");
}

#[test]
fn cuts_preset_below_min_input_fails_every_row() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let sweep = dentage(&[
        "sweep",
        "--config",
        fx.config.to_str().unwrap(),
        "--sweep",
        "cuts",
        "--out",
        dir.path().join("sweep").to_str().unwrap(),
    ]);
    assert_eq!(code(&sweep), 2, "all rows fail: input 48 is under the 75 px minimum");
    let err = stderr(&sweep);
    assert!(err.contains("InceptionV3Mixed_03"), "stderr: {err}");
    assert!(err.contains("InceptionV3Mixed_09"), "stderr: {err}");
}

#[test]
fn help_succeeds_and_bad_usage_exits_one() {
    assert_eq!(code(&dentage(&["--help"])), 0);
    assert_eq!(code(&dentage(&["train"])), 1, "missing required --config");
    assert_eq!(code(&dentage(&["frobnicate"])), 1, "unknown subcommand");
}
