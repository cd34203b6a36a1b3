//! Regression metrics (MSE, RMSE, MAE, R²) as pure functions over
//! prediction/target vectors, using the population (1/N) convention.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("empty evaluation batch")]
    EmptyBatch,
    #[error("predictions ({predictions}) and targets ({targets}) differ in length")]
    LengthMismatch { predictions: usize, targets: usize },
    #[error("non-finite value in evaluation batch")]
    NonFinite,
    #[error("targets have zero variance; the coefficient of determination is undefined")]
    ZeroVariance,
}

/// A finished evaluation pass: predicted ages paired with actual ages.
///
/// Construction validates the invariants (equal nonzero lengths, all values
/// finite), so every existing batch is safe to compute on.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationBatch {
    predictions: Vec<f64>,
    targets: Vec<f64>,
}

impl EvaluationBatch {
    pub fn new(predictions: Vec<f64>, targets: Vec<f64>) -> Result<Self, MetricsError> {
        if predictions.len() != targets.len() {
            return Err(MetricsError::LengthMismatch {
                predictions: predictions.len(),
                targets: targets.len(),
            });
        }
        if predictions.is_empty() {
            return Err(MetricsError::EmptyBatch);
        }
        if predictions.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite);
        }
        Ok(Self { predictions, targets })
    }

    pub fn n(&self) -> usize {
        self.predictions.len()
    }

    pub fn predictions(&self) -> &[f64] {
        &self.predictions
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn target_mean(&self) -> f64 {
        self.targets.iter().sum::<f64>() / self.targets.len() as f64
    }
}

/// All four metrics for one batch, plus the batch size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub n: usize,
}

/// Mean squared error, (1/N)·Σ(pred−target)².
pub fn compute_mse(batch: &EvaluationBatch) -> Result<f64, MetricsError> {
    if batch.predictions.is_empty() {
        return Err(MetricsError::EmptyBatch);
    }
    let n = batch.n() as f64;
    let ss: f64 = batch
        .predictions
        .iter()
        .zip(&batch.targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(ss / n)
}

/// Root mean squared error, √MSE.
pub fn compute_rmse(batch: &EvaluationBatch) -> Result<f64, MetricsError> {
    compute_mse(batch).map(f64::sqrt)
}

/// Mean absolute error, (1/N)·Σ|pred−target|.
pub fn compute_mae(batch: &EvaluationBatch) -> Result<f64, MetricsError> {
    if batch.predictions.is_empty() {
        return Err(MetricsError::EmptyBatch);
    }
    let n = batch.n() as f64;
    let sa: f64 = batch.predictions.iter().zip(&batch.targets).map(|(p, t)| (p - t).abs()).sum();
    Ok(sa / n)
}

/// Coefficient of determination, (SS_tot − SS_res)/SS_tot. Can be negative
/// for models worse than the target mean; never clamped.
pub fn compute_r2(batch: &EvaluationBatch) -> Result<f64, MetricsError> {
    if batch.predictions.is_empty() {
        return Err(MetricsError::EmptyBatch);
    }
    let mean = batch.target_mean();
    let ss_tot: f64 = batch.targets.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    let ss_res: f64 = batch
        .predictions
        .iter()
        .zip(&batch.targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((ss_tot - ss_res) / ss_tot)
}

/// All four metrics at once.
pub fn compute_report(batch: &EvaluationBatch) -> Result<MetricsReport, MetricsError> {
    Ok(MetricsReport {
        mse: compute_mse(batch)?,
        rmse: compute_rmse(batch)?,
        mae: compute_mae(batch)?,
        r2: compute_r2(batch)?,
        n: batch.n(),
    })
}
