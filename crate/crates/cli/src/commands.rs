//! The six subcommands: train, evaluate, sweep, explain, dataset-report,
//! synth. Each resolves an effective configuration, refuses to clobber
//! existing outputs unless `--overwrite` is passed, and stamps the config
//! hash into every JSON sidecar it writes.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use dentage_core::dataset::{load_manifest, split_dataset, ImageRecord};
use dentage_core::metrics::{compute_report, EvaluationBatch, MetricsReport};
use dentage_core::synth;
use dentage_core::trainer::{evaluate_records, train, write_history_csv};
use dentage_core::{
    age_histogram, explain_image, load_checkpoint, load_meta, prediction_scatter,
    save_checkpoint, save_image32_png, training_curves, ModelSpec,
};
use serde::Serialize;

use crate::config::{config_hash, parse_sweep_entry, ExperimentConfig};
use crate::{CliError, CResult};

fn usage(e: anyhow::Error) -> CliError {
    CliError::Usage(e)
}

fn runtime(e: anyhow::Error) -> CliError {
    CliError::Runtime(e)
}

/// Refuse to overwrite any existing output unless the flag was passed.
fn guard_outputs(paths: &[PathBuf], overwrite: bool) -> CResult<()> {
    if overwrite {
        return Ok(());
    }
    for p in paths {
        if p.exists() {
            return Err(usage(anyhow!(
                "output {} already exists; pass --overwrite to replace it",
                p.display()
            )));
        }
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> CResult<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(runtime)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CResult<()> {
    let text = serde_json::to_string_pretty(value).expect("artifact serialization cannot fail");
    std::fs::write(path, text + "\n")
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(runtime)
}

/// Run-level sidecar tying a directory of artifacts to the settings hash.
fn write_run_sidecar(dir: &Path, command: &str, hash: &str, artifacts: &[&str]) -> CResult<()> {
    write_json(
        &dir.join("run.json"),
        &serde_json::json!({ "command": command, "config_hash": hash, "artifacts": artifacts }),
    )
}

/// Load a config file (usage error on any problem) and apply CLI overrides.
fn resolve_config(
    path: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
) -> CResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).map_err(usage)?;
    if let Some(out) = out {
        cfg.output_dir = out.to_path_buf();
    }
    if let Some(seed) = seed {
        cfg.dataset.seed = seed;
        cfg.training.seed = seed;
    }
    Ok(cfg)
}

/// Manifest loading is part of config validation: a bad path is a usage
/// error, reported with the underlying missing-file message.
fn load_records(manifest: &Path) -> CResult<Vec<ImageRecord>> {
    load_manifest(manifest)
        .with_context(|| format!("manifest {}", manifest.display()))
        .map_err(usage)
}

fn split_records(
    records: &[ImageRecord],
    cfg: &ExperimentConfig,
) -> CResult<dentage_core::DatasetSplit> {
    split_dataset(records, cfg.dataset.counts(), cfg.dataset.seed)
        .context("dataset split")
        .map_err(usage)
}

// ---------------------------------------------------------------- train ----

pub fn cmd_train(
    config: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    overwrite: bool,
) -> CResult<()> {
    let cfg = resolve_config(config, out, seed)?;
    let hash = config_hash(&cfg);
    let dir = cfg.output_dir.clone();
    let history_path = dir.join("history.csv");
    let curves_path = dir.join("curves.png");
    let ckpt_dir = dir.join("checkpoint");
    guard_outputs(
        &[
            history_path.clone(),
            curves_path.clone(),
            ckpt_dir.join(dentage_core::checkpoint::WEIGHTS_FILE),
        ],
        overwrite,
    )?;

    let records = load_records(&cfg.dataset.manifest)?;
    let split = split_records(&records, &cfg)?;
    let spec = cfg.model.to_spec().map_err(usage)?;
    let mut model = spec.build(cfg.training.seed).context("model build").map_err(runtime)?;
    println!(
        "training {} ({} trainable parameters) on {} train / {} val images",
        model.label(),
        model.trainable_parameter_count(),
        split.train.len(),
        split.val.len()
    );

    let state = train(&mut model, &split, &cfg.training, &cfg.augmentation, |r| {
        println!(
            "epoch {:>3}: train_loss {:.4} val_loss {:.4} train_mae {:.3} val_mae {:.3} lr {:.3e}",
            r.epoch, r.train_loss, r.val_loss, r.train_mae, r.val_mae, r.lr
        );
    })
    .context("training")
    .map_err(runtime)?;

    ensure_dir(&dir)?;
    write_history_csv(&history_path, &state.history)
        .context("history.csv")
        .map_err(runtime)?;
    training_curves(&curves_path, &state.history).context("curves.png").map_err(runtime)?;
    save_checkpoint(&model, &ckpt_dir, &hash, Some(state.best_val_loss))
        .context("checkpoint")
        .map_err(runtime)?;
    write_run_sidecar(&dir, "train", &hash, &["history.csv", "curves.png", "checkpoint"])?;
    println!(
        "done: best val loss {:.4} at epoch {}; artifacts in {}",
        state.best_val_loss,
        state.best_epoch,
        dir.display()
    );
    Ok(())
}

// ------------------------------------------------------------- evaluate ----

pub fn cmd_evaluate(
    checkpoint: &Path,
    manifest: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    overwrite: bool,
) -> CResult<()> {
    let cfg = match config {
        Some(path) => Some(resolve_config(path, out, None)?),
        None => None,
    };
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.as_ref().map(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("dentage-out"));
    let metrics_path = dir.join("metrics.json");
    let predictions_path = dir.join("predictions.csv");
    let scatter_path = dir.join("scatter.png");
    guard_outputs(
        &[metrics_path.clone(), predictions_path.clone(), scatter_path.clone()],
        overwrite,
    )?;

    let records = load_records(manifest)?;
    // With a config the evaluation set is the test part of the configured
    // split; without one the whole manifest is evaluated.
    let eval_records: Vec<ImageRecord> = match &cfg {
        Some(cfg) => split_records(&records, cfg)?.test,
        None => records,
    };
    let batch_size = cfg.as_ref().map_or(16, |c| c.training.batch_size);

    let meta = load_meta(checkpoint).context("checkpoint").map_err(runtime)?;
    let pairs: Vec<(f64, f64)> = if meta.is_perfect_stub() {
        // Test hook: an oracle that predicts the label exactly.
        eval_records.iter().map(|r| (r.age_years, r.age_years)).collect()
    } else {
        let (model, _) = load_checkpoint(checkpoint).context("checkpoint").map_err(runtime)?;
        evaluate_records(&model, &eval_records, batch_size)
            .context("evaluation")
            .map_err(runtime)?
    };

    let (actuals, predictions): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let batch = EvaluationBatch::new(predictions, actuals).context("metrics").map_err(runtime)?;
    let report = compute_report(&batch).context("metrics").map_err(runtime)?;

    ensure_dir(&dir)?;
    write_metrics_json(&metrics_path, &report, &hash_for_eval(&cfg, checkpoint, manifest))?;
    write_predictions_csv(&predictions_path, &eval_records, &pairs)?;
    prediction_scatter(&scatter_path, &pairs).context("scatter.png").map_err(runtime)?;
    write_run_sidecar(
        &dir,
        "evaluate",
        &hash_for_eval(&cfg, checkpoint, manifest),
        &["metrics.json", "predictions.csv", "scatter.png"],
    )?;
    println!(
        "evaluated {} images: mae {:.3} rmse {:.3} r2 {:.4}",
        report.n, report.mae, report.rmse, report.r2
    );
    Ok(())
}

/// Hash of the effective evaluation settings: the experiment config when
/// given, otherwise the checkpoint + manifest identity.
fn hash_for_eval(cfg: &Option<ExperimentConfig>, checkpoint: &Path, manifest: &Path) -> String {
    match cfg {
        Some(cfg) => config_hash(cfg),
        None => config_hash(&serde_json::json!({
            "checkpoint": checkpoint.display().to_string(),
            "manifest": manifest.display().to_string(),
        })),
    }
}

fn write_metrics_json(path: &Path, report: &MetricsReport, hash: &str) -> CResult<()> {
    write_json(
        path,
        &serde_json::json!({
            "mse": report.mse,
            "rmse": report.rmse,
            "mae": report.mae,
            "r2": report.r2,
            "n": report.n,
            "config_hash": hash,
        }),
    )
}

fn write_predictions_csv(
    path: &Path,
    records: &[ImageRecord],
    pairs: &[(f64, f64)],
) -> CResult<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(runtime)?;
    w.write_record(["image_path", "actual_age", "predicted_age"])
        .context("predictions.csv")
        .map_err(runtime)?;
    for (record, (actual, predicted)) in records.iter().zip(pairs) {
        w.write_record([
            record.image_path.display().to_string(),
            format!("{actual}"),
            format!("{predicted}"),
        ])
        .context("predictions.csv")
        .map_err(runtime)?;
    }
    w.flush().context("predictions.csv").map_err(runtime)
}

// ---------------------------------------------------------------- sweep ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepKind {
    /// All six full backbones with their classifier-stage heads.
    Backbones,
    /// The seven truncation points of the deep backbone.
    Cuts,
}

#[derive(Serialize)]
struct SweepRow {
    model: String,
    total_trainable_params: Option<usize>,
    test_mae: Option<f64>,
    test_rmse: Option<f64>,
    test_r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn cmd_sweep(
    config: &Path,
    kind: Option<SweepKind>,
    out: Option<&Path>,
    seed: Option<u64>,
    overwrite: bool,
) -> CResult<()> {
    let cfg = resolve_config(config, out, seed)?;
    let hash = config_hash(&cfg);
    let dir = cfg.output_dir.clone();
    let csv_path = dir.join("sweep.csv");
    let md_path = dir.join("sweep.md");
    guard_outputs(&[csv_path.clone(), md_path.clone()], overwrite)?;

    // Each entry becomes a (label, buildable-spec-or-error) pair; a bad
    // entry is a failed row, not a failed sweep.
    let preset = |name, cut| {
        let mut spec = ModelSpec::reference(name, cut);
        spec.truncation.backbone.pretrained = cfg.model.pretrained;
        spec.truncation.backbone.input_shape = (cfg.model.input_size, cfg.model.input_size, 3);
        spec
    };
    let entries: Vec<(String, anyhow::Result<ModelSpec>)> = match kind {
        Some(SweepKind::Backbones) => dentage_core::backbones::BackboneName::ALL
            .iter()
            .map(|&name| (name.table_label().to_string(), Ok(preset(name, None))))
            .collect(),
        Some(SweepKind::Cuts) => (dentage_core::CUT_MIN..=dentage_core::CUT_MAX)
            .map(|k| {
                let name = dentage_core::BackboneName::InceptionV3;
                (format!("{}Mixed_{k:02}", name.table_label()), Ok(preset(name, Some(k))))
            })
            .collect(),
        None => {
            if cfg.sweep.models.is_empty() {
                return Err(usage(anyhow!(
                    "no models to sweep: pass --sweep backbones|cuts or list sweep.models in the config"
                )));
            }
            cfg.sweep
                .models
                .iter()
                .map(|entry| (entry.clone(), parse_sweep_entry(entry, &cfg.model)))
                .collect()
        }
    };

    let records = load_records(&cfg.dataset.manifest)?;
    let split = split_records(&records, &cfg)?;

    let mut rows = Vec::with_capacity(entries.len());
    let mut succeeded = 0usize;
    for (label, spec) in &entries {
        let row = match spec {
            Ok(spec) => sweep_one(spec, &split, &cfg),
            Err(e) => SweepRow {
                model: label.clone(),
                total_trainable_params: None,
                test_mae: None,
                test_rmse: None,
                test_r2: None,
                error: Some(format!("{e:#}")),
            },
        };
        if row.error.is_none() {
            succeeded += 1;
        } else {
            eprintln!(
                "sweep row {} failed: {}",
                row.model,
                row.error.as_deref().unwrap_or("unknown")
            );
        }
        rows.push(row);
    }
    rows.sort_by(|a, b| a.model.cmp(&b.model));

    if succeeded == 0 {
        return Err(runtime(anyhow!("all {} sweep rows failed", rows.len())));
    }
    ensure_dir(&dir)?;
    write_sweep_csv(&csv_path, &rows)?;
    write_sweep_md(&md_path, &rows)?;
    write_run_sidecar(&dir, "sweep", &hash, &["sweep.csv", "sweep.md"])?;
    println!(
        "sweep complete: {}/{} models succeeded; report in {}",
        succeeded,
        rows.len(),
        csv_path.display()
    );
    Ok(())
}

/// Train and evaluate one sweep entry under the shared protocol; failures
/// land in the row instead of aborting the sweep.
fn sweep_one(
    spec: &ModelSpec,
    split: &dentage_core::DatasetSplit,
    cfg: &ExperimentConfig,
) -> SweepRow {
    let label_fallback = format!(
        "{}{}",
        spec.truncation.backbone.name.table_label(),
        spec.truncation
            .cut_block_index
            .map(|k| format!("Mixed_{k:02}"))
            .unwrap_or_default()
    );
    let attempt = || -> anyhow::Result<(String, usize, MetricsReport)> {
        let mut model = spec.build(cfg.training.seed)?;
        let label = model.label();
        let params = model.trainable_parameter_count();
        println!("sweep: training {label} ({params} trainable parameters)");
        train(&mut model, split, &cfg.training, &cfg.augmentation, |_| {})?;
        let pairs = evaluate_records(&model, &split.test, cfg.training.batch_size)?;
        let (actuals, predictions): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let report = compute_report(&EvaluationBatch::new(predictions, actuals)?)?;
        Ok((label, params, report))
    };
    match attempt() {
        Ok((label, params, report)) => SweepRow {
            model: label,
            total_trainable_params: Some(params),
            test_mae: Some(report.mae),
            test_rmse: Some(report.rmse),
            test_r2: Some(report.r2),
            error: None,
        },
        Err(e) => SweepRow {
            model: label_fallback,
            total_trainable_params: None,
            test_mae: None,
            test_rmse: None,
            test_r2: None,
            error: Some(format!("{e:#}")),
        },
    }
}

fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> CResult<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(runtime)?;
    w.write_record(["model", "total_trainable_params", "test_mae", "test_rmse", "test_r2"])
        .context("sweep.csv")
        .map_err(runtime)?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in rows {
        w.write_record([
            r.model.clone(),
            opt(r.total_trainable_params.map(|v| v.to_string())),
            opt(r.test_mae.map(|v| v.to_string())),
            opt(r.test_rmse.map(|v| v.to_string())),
            opt(r.test_r2.map(|v| v.to_string())),
        ])
        .context("sweep.csv")
        .map_err(runtime)?;
    }
    w.flush().context("sweep.csv").map_err(runtime)
}

fn write_sweep_md(path: &Path, rows: &[SweepRow]) -> CResult<()> {
    let mut md = String::from("# Model sweep\n\n");
    md.push_str("| Model | Trainable params | Test MAE | Test RMSE | Test R2 |\n");
    md.push_str("|---|---:|---:|---:|---:|\n");
    for r in rows {
        let num = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "—".into());
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            r.model,
            r.total_trainable_params
                .map(|p| p.to_string())
                .unwrap_or_else(|| "—".into()),
            num(r.test_mae),
            num(r.test_rmse),
            num(r.test_r2),
        ));
    }
    md.push_str(
        "\nTruncated-variant labels are disambiguated by the parameter column: \
         the cut index k keeps backbone blocks 0..=k, and matching a row to a \
         published variant goes by trainable-parameter count, not by name.\n",
    );
    let failures: Vec<&SweepRow> = rows.iter().filter(|r| r.error.is_some()).collect();
    if !failures.is_empty() {
        md.push_str("\n## Failed rows\n\n");
        for r in failures {
            md.push_str(&format!("- {}: {}\n", r.model, r.error.as_deref().unwrap()));
        }
    }
    std::fs::write(path, md)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(runtime)
}

// -------------------------------------------------------------- explain ----

pub fn cmd_explain(
    checkpoint: &Path,
    image: &Path,
    out: &Path,
    overwrite: bool,
) -> CResult<()> {
    let sidecar = out.with_extension("json");
    guard_outputs(&[out.to_path_buf(), sidecar.clone()], overwrite)?;

    let meta = load_meta(checkpoint).context("checkpoint").map_err(runtime)?;
    if meta.is_perfect_stub() {
        return Err(runtime(anyhow!("the perfect-stub checkpoint has no weights to explain")));
    }
    let (model, meta) = load_checkpoint(checkpoint).context("checkpoint").map_err(runtime)?;
    let result = explain_image(&model, image).context("explanation").map_err(runtime)?;

    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    save_image32_png(out, &result.overlay).context("overlay png").map_err(runtime)?;
    write_json(
        &sidecar,
        &serde_json::json!({
            "predicted_age": result.predicted_age,
            "target_layer": result.target_layer,
            "image": image.display().to_string(),
            "config_hash": meta.train_config_hash,
        }),
    )?;
    println!(
        "predicted age {:.2} years; overlay written to {}",
        result.predicted_age,
        out.display()
    );
    Ok(())
}

// ------------------------------------------------------- dataset-report ----

pub fn cmd_dataset_report(manifest: &Path, out: Option<&Path>, overwrite: bool) -> CResult<()> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("dentage-report"));
    let png_path = dir.join("age_distribution.png");
    let summary_path = dir.join("summary.json");
    guard_outputs(&[png_path.clone(), summary_path.clone()], overwrite)?;

    let records = load_records(manifest)?;
    let ages: Vec<f64> = records.iter().map(|r| r.age_years).collect();
    let n = ages.len();
    let min = ages.iter().copied().fold(f64::INFINITY, f64::min);
    let max = ages.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = ages.iter().sum::<f64>() / n as f64;
    let hash = config_hash(&serde_json::json!({ "manifest": manifest.display().to_string() }));

    ensure_dir(&dir)?;
    age_histogram(&png_path, &ages).context("age_distribution.png").map_err(runtime)?;
    write_json(
        &summary_path,
        &serde_json::json!({
            "count": n, "min": min, "max": max, "mean": mean, "config_hash": hash,
        }),
    )?;
    write_run_sidecar(&dir, "dataset-report", &hash, &["age_distribution.png", "summary.json"])?;
    println!("{n} records, ages {min:.1}–{max:.1} (mean {mean:.1}); report in {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------- synth ----

pub fn cmd_synth(
    out: &Path,
    count: usize,
    seed: u64,
    image_size: usize,
    overwrite: bool,
) -> CResult<()> {
    guard_outputs(&[out.join("manifest.csv")], overwrite)?;
    let config = synth::SynthConfig {
        count,
        seed,
        image_size,
        ..synth::SynthConfig::default()
    };
    let hash = config_hash(&serde_json::json!({
        "count": count, "seed": seed, "image_size": image_size,
    }));
    let dataset = synth::generate(&config, out).context("synthesis").map_err(runtime)?;
    write_run_sidecar(out, "synth", &hash, &["manifest.csv", "images"])?;
    println!(
        "wrote {} synthetic radiographs; manifest at {}",
        dataset.records.len(),
        dataset.manifest_path.display()
    );
    Ok(())
}
