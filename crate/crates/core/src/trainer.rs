//! Training loop: Adam optimization of the mean-squared-error loss with a
//! plateau learning-rate schedule, early stopping on validation loss, full
//! per-epoch history, and best-weights restore.
//!
//! The schedule and stopping rules are pure functions over
//! [`TrainingState`], so they can be validated with scripted loss sequences
//! and no model in the loop.

use std::io::Write as _;
use std::path::Path;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::augment::{self, AugmentError, AugmentationConfig};
use crate::dataset::{
    load_and_preprocess, ChannelPolicy, DatasetError, DatasetSplit, Image32, ImageRecord,
    PreprocessSpec,
};
use crate::nn::{rng_for, Adam, AdamConfig};
use crate::regressor::{RegressionModel, RegressorError};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch}; model restored to last good weights")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("history file malformed: {0}")]
    MalformedHistory(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error("tensor operation failed: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Hyperparameters of the training protocol.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub max_epochs: usize,
    pub initial_lr: f64,
    /// Epochs without validation improvement before a learning-rate cut.
    pub plateau_patience: usize,
    /// Multiplier applied to the learning rate at each plateau.
    pub plateau_factor: f64,
    /// Epochs without validation improvement before training stops.
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Shuffle the training set every epoch (disable for exact-repeat runs).
    pub shuffle: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            max_epochs: 500,
            initial_lr: 1e-3,
            plateau_patience: 7,
            plateau_factor: 0.8,
            early_stop_patience: 25,
            batch_size: 16,
            seed: 42,
            shuffle: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |msg: String| Err(TrainerError::InvalidConfig(msg));
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor {} outside (0, 1)", self.plateau_factor));
        }
        if self.plateau_patience >= self.early_stop_patience {
            return bad(format!(
                "plateau_patience {} must be below early_stop_patience {}",
                self.plateau_patience, self.early_stop_patience
            ));
        }
        if self.max_epochs < self.early_stop_patience {
            return bad(format!(
                "max_epochs {} below early_stop_patience {}",
                self.max_epochs, self.early_stop_patience
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".to_string());
        }
        if !(self.initial_lr.is_finite() && self.initial_lr >= 0.0) {
            return bad(format!("initial_lr {} invalid", self.initial_lr));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_mae: f64,
    pub val_mae: f64,
    /// Learning rate after end-of-epoch scheduling (drops appear on the
    /// epoch that triggered them).
    pub lr: f64,
}

/// Mutable bookkeeping of a training run.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub epoch: usize,
    pub current_lr: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub epochs_since_reduction: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainingState {
    pub fn new(initial_lr: f64) -> Self {
        Self {
            epoch: 0,
            current_lr: initial_lr,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_best: 0,
            epochs_since_reduction: 0,
            history: Vec::new(),
        }
    }

    /// Record the end-of-epoch validation loss. Any decrease counts as an
    /// improvement (no minimum delta). Returns whether this epoch improved.
    pub fn observe_validation(&mut self, epoch: usize, val_loss: f64) -> bool {
        self.epoch = epoch;
        let improved = val_loss < self.best_val_loss;
        if improved {
            self.best_val_loss = val_loss;
            self.best_epoch = epoch;
        }
        self.epochs_since_best = epoch - self.best_epoch;
        improved
    }
}

/// End-of-epoch learning-rate schedule: once the validation loss has
/// plateaued for a full patience window — and at least a full window has
/// passed since the previous cut — multiply the learning rate by the
/// plateau factor. Call after [`TrainingState::observe_validation`].
pub fn step_scheduler(state: &mut TrainingState, config: &TrainingConfig) {
    state.epochs_since_reduction += 1;
    if state.epochs_since_best >= config.plateau_patience
        && state.epochs_since_reduction >= config.plateau_patience
    {
        state.current_lr *= config.plateau_factor;
        state.epochs_since_reduction = 0;
    }
}

/// End-of-epoch stopping rule: stop after a full early-stop window without
/// improvement, or at the epoch cap.
pub fn should_stop(state: &TrainingState, config: &TrainingConfig) -> bool {
    state.epochs_since_best >= config.early_stop_patience || state.epoch >= config.max_epochs
}

/// Drive the scheduler and stopping rule with a scripted validation-loss
/// sequence (no model involved). Stops early exactly as a real run would;
/// history rows carry the scripted loss in both loss columns.
pub fn simulate_schedule(val_losses: &[f64], config: &TrainingConfig) -> TrainingState {
    let mut state = TrainingState::new(config.initial_lr);
    for (i, &loss) in val_losses.iter().enumerate() {
        let epoch = i + 1;
        state.observe_validation(epoch, loss);
        step_scheduler(&mut state, config);
        state.history.push(EpochRecord {
            epoch,
            train_loss: loss,
            val_loss: loss,
            train_mae: loss.abs().sqrt(),
            val_mae: loss.abs().sqrt(),
            lr: state.current_lr,
        });
        if should_stop(&state, config) {
            break;
        }
    }
    state
}

/// The preprocessing recipe matching a model's input geometry and its
/// backbone's normalization.
pub fn preprocess_spec_for(model: &RegressionModel) -> PreprocessSpec {
    let (h, w, _) = model.extractor().input_shape();
    PreprocessSpec {
        target_height: h,
        target_width: w,
        channel_policy: ChannelPolicy::ReplicateGrayTo3,
        normalization: model.extractor().name().normalization(),
    }
}

struct CachedImage {
    gray: Image32,
    age: f64,
}

fn load_gray_cache(
    records: &[ImageRecord],
    height: usize,
    width: usize,
) -> Result<Vec<CachedImage>, TrainerError> {
    records
        .iter()
        .map(|r| {
            let gray = crate::dataset::load_gray_resized(&r.image_path, height, width)?;
            Ok(CachedImage { gray, age: r.age_years })
        })
        .collect()
}

fn batch_tensor(rows: &[Vec<f32>], c: usize, h: usize, w: usize) -> Result<Tensor, TrainerError> {
    let mut flat = Vec::with_capacity(rows.len() * c * h * w);
    for r in rows {
        flat.extend_from_slice(r);
    }
    Ok(Tensor::from_vec(flat, (rows.len(), c, h, w), &candle_core::Device::Cpu)?)
}

fn target_tensor(ages: &[f64]) -> Result<Tensor, TrainerError> {
    let v: Vec<f32> = ages.iter().map(|&a| a as f32).collect();
    Ok(Tensor::from_vec(v, (ages.len(), 1), &candle_core::Device::Cpu)?)
}

/// Accumulates exact per-sample sums so epoch metrics are true means.
#[derive(Default)]
struct RunningError {
    sq: f64,
    abs: f64,
    n: usize,
}

impl RunningError {
    fn add_batch(&mut self, preds: &[f32], ages: &[f64]) {
        for (&p, &a) in preds.iter().zip(ages) {
            let d = p as f64 - a;
            self.sq += d * d;
            self.abs += d.abs();
        }
        self.n += preds.len();
    }

    fn mse(&self) -> f64 {
        self.sq / self.n as f64
    }

    fn mae(&self) -> f64 {
        self.abs / self.n as f64
    }
}

/// Run `model` over preprocessed rows in inference mode, collecting
/// predictions.
fn forward_rows(
    model: &RegressionModel,
    rows: &[Vec<f32>],
    ages: &[f64],
    batch_size: usize,
    (c, h, w): (usize, usize, usize),
) -> Result<(Vec<f64>, RunningError), TrainerError> {
    let mut preds = Vec::with_capacity(rows.len());
    let mut err = RunningError::default();
    for (chunk, age_chunk) in rows.chunks(batch_size).zip(ages.chunks(batch_size)) {
        let x = batch_tensor(chunk, c, h, w)?;
        let y = model.forward(&x, false)?;
        let p: Vec<f32> = y.flatten_all()?.to_vec1()?;
        err.add_batch(&p, age_chunk);
        preds.extend(p.into_iter().map(|v| v as f64));
    }
    Ok((preds, err))
}

/// Load, preprocess, and predict a record list in inference mode; returns
/// `(actual, predicted)` pairs in input order.
pub fn evaluate_records(
    model: &RegressionModel,
    records: &[ImageRecord],
    batch_size: usize,
) -> Result<Vec<(f64, f64)>, TrainerError> {
    if records.is_empty() {
        return Err(TrainerError::EmptySplit("evaluation"));
    }
    let spec = preprocess_spec_for(model);
    let mut rows = Vec::with_capacity(records.len());
    let mut ages = Vec::with_capacity(records.len());
    for r in records {
        let img = load_and_preprocess(r, &spec)?;
        rows.push(img.to_chw_vec());
        ages.push(r.age_years);
    }
    let (h, w, _) = model.extractor().input_shape();
    let (preds, _) = forward_rows(model, &rows, &ages, batch_size.max(1), (3, h, w))?;
    Ok(ages.into_iter().zip(preds).collect())
}

/// Train `model` on the split's training part, monitoring validation loss.
/// On return the model holds the weights (and normalization statistics) of
/// the best validation epoch. `progress` is called once per completed epoch.
pub fn train(
    model: &mut RegressionModel,
    split: &DatasetSplit,
    config: &TrainingConfig,
    aug: &AugmentationConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainingState, TrainerError> {
    config.validate()?;
    let aug = aug.clone().validated()?;
    if split.train.is_empty() {
        return Err(TrainerError::EmptySplit("train"));
    }
    if split.val.is_empty() {
        return Err(TrainerError::EmptySplit("val"));
    }
    if split.test.is_empty() {
        return Err(TrainerError::EmptySplit("test"));
    }

    let (h, w, _) = model.extractor().input_shape();
    let normalization = model.extractor().name().normalization();
    let train_cache = load_gray_cache(&split.train, h, w)?;
    let val_cache = load_gray_cache(&split.val, h, w)?;
    // Validation images never change: preprocess once.
    let val_rows: Vec<Vec<f32>> = val_cache
        .iter()
        .map(|ci| {
            let mut img = ci.gray.replicate_channels(3);
            normalization.apply(&mut img);
            img.to_chw_vec()
        })
        .collect();
    let val_ages: Vec<f64> = val_cache.iter().map(|ci| ci.age).collect();

    let mut adam = Adam::new(
        model.store().trainable_vars(),
        AdamConfig { lr: config.initial_lr, ..AdamConfig::default() },
    )?;
    let mut state = TrainingState::new(config.initial_lr);
    let mut best_snapshot = None;
    let seed = config.seed;

    for epoch in 1..=config.max_epochs {
        adam.set_learning_rate(state.current_lr);

        let mut order: Vec<usize> = (0..train_cache.len()).collect();
        if config.shuffle {
            let mut rng = rng_for(seed, &format!("train.epoch{epoch}.shuffle"));
            order.shuffle(&mut rng);
        }
        let mut aug_rng = rng_for(seed, &format!("train.epoch{epoch}.augment"));

        let mut train_err = RunningError::default();
        for batch_ids in order.chunks(config.batch_size) {
            let mut rows = Vec::with_capacity(batch_ids.len());
            let mut ages = Vec::with_capacity(batch_ids.len());
            for &i in batch_ids {
                let ci = &train_cache[i];
                let sample = augment::sample_params(&aug, (h, w), &mut aug_rng);
                let warped = augment::apply(&ci.gray, &sample, aug.fill_policy);
                let mut img = warped.replicate_channels(3);
                normalization.apply(&mut img);
                rows.push(img.to_chw_vec());
                ages.push(ci.age);
            }
            let x = batch_tensor(&rows, 3, h, w)?;
            let y = target_tensor(&ages)?;
            let pred = model.forward(&x, true)?;
            let loss = pred.sub(&y)?.sqr()?.mean_all()?;
            let loss_val: f32 = loss.to_scalar()?;
            if !loss_val.is_finite() {
                if let Some(snap) = &best_snapshot {
                    model.store().restore(snap)?;
                }
                return Err(TrainerError::NonFiniteLoss { epoch });
            }
            let grads = loss.backward()?;
            adam.step(&grads)?;
            let p: Vec<f32> = pred.flatten_all()?.to_vec1()?;
            train_err.add_batch(&p, &ages);
        }

        let (_, val_err) = forward_rows(model, &val_rows, &val_ages, config.batch_size, (3, h, w))?;
        let val_loss = val_err.mse();
        if !val_loss.is_finite() {
            if let Some(snap) = &best_snapshot {
                model.store().restore(snap)?;
            }
            return Err(TrainerError::NonFiniteLoss { epoch });
        }

        let improved = state.observe_validation(epoch, val_loss);
        if improved {
            best_snapshot = Some(model.store().snapshot()?);
        }
        step_scheduler(&mut state, config);
        let record = EpochRecord {
            epoch,
            train_loss: train_err.mse(),
            val_loss,
            train_mae: train_err.mae(),
            val_mae: val_err.mae(),
            lr: state.current_lr,
        };
        state.history.push(record);
        progress(&record);
        if should_stop(&state, config) {
            break;
        }
    }

    if let Some(snap) = &best_snapshot {
        model.store().restore(snap)?;
    }
    Ok(state)
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,train_mae,val_mae,lr";

/// Write the per-epoch history as CSV (floats in shortest round-trip form).
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<(), TrainerError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{HISTORY_HEADER}")?;
    for r in history {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_loss, r.train_mae, r.val_mae, r.lr
        )?;
    }
    Ok(())
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>, TrainerError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == HISTORY_HEADER => {}
        other => {
            return Err(TrainerError::MalformedHistory(format!(
                "bad header {other:?}, expected {HISTORY_HEADER:?}"
            )))
        }
    }
    let mut out = Vec::new();
    for (li, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(TrainerError::MalformedHistory(format!(
                "line {}: {} columns, expected 6",
                li + 2,
                cols.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64, TrainerError> {
            s.trim()
                .parse()
                .map_err(|e| TrainerError::MalformedHistory(format!("line {}: {e}", li + 2)))
        };
        out.push(EpochRecord {
            epoch: cols[0]
                .trim()
                .parse()
                .map_err(|e| TrainerError::MalformedHistory(format!("line {}: {e}", li + 2)))?,
            train_loss: parse_f(cols[1])?,
            val_loss: parse_f(cols[2])?,
            train_mae: parse_f(cols[3])?,
            val_mae: parse_f(cols[4])?,
            lr: parse_f(cols[5])?,
        });
    }
    Ok(out)
}
