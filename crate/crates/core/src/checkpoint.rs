//! Model checkpointing: a weights file plus a JSON sidecar describing the
//! architecture, preprocessing, and provenance needed to reload it.
//!
//! A checkpoint directory holds `model.safetensors` (every parameter and
//! normalization statistic) and `model.json`. Loading rebuilds the declared
//! architecture and strictly loads the weights — any disagreement between
//! the sidecar and the weight file (missing/extra/mis-shaped tensors,
//! wrong parameter count) is a [`CheckpointError::Mismatch`].

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::backbones::{BackboneError, BackboneName, BackboneSpec, TruncationSpec};
use crate::dataset::{DatasetError, Normalization};
use crate::regressor::{HeadSpec, ModelSpec, RegressionModel, RegressorError};

pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const SIDECAR_FILE: &str = "model.json";

/// Marker backbone for a test-hook checkpoint that "predicts" the true
/// label: it has a sidecar but no weights, and evaluation short-circuits on
/// it. Used to validate reporting plumbing end to end.
pub const PERFECT_STUB_BACKBONE: &str = "perfect_stub";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint file missing: {0}")]
    NotFound(PathBuf),
    #[error("checkpoint inconsistent: {0}")]
    Mismatch(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("sidecar JSON invalid: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// The `model.json` sidecar.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    /// Backbone key (`inception_v3`, …) or the perfect-stub marker.
    pub backbone: String,
    pub cut_block_index: Option<u8>,
    /// Input-normalization key the model expects.
    pub normalization: String,
    /// Head recipe key (`direct`, `hidden:300`, `classifier`).
    pub head: String,
    pub input_height: usize,
    pub input_width: usize,
    pub trainable_parameter_count: usize,
    /// Hash of the experiment config that produced this checkpoint.
    pub train_config_hash: String,
    /// Seed the architecture was initialized from (needed to rebuild).
    pub seed: u64,
    /// Best validation loss seen during training, if this came from a run.
    pub best_val_loss: Option<f64>,
}

impl CheckpointMeta {
    pub fn is_perfect_stub(&self) -> bool {
        self.backbone == PERFECT_STUB_BACKBONE
    }
}

/// Write `model.safetensors` + `model.json` into `dir` (created if absent).
pub fn save_checkpoint(
    model: &RegressionModel,
    dir: &Path,
    train_config_hash: &str,
    best_val_loss: Option<f64>,
) -> Result<CheckpointMeta, CheckpointError> {
    std::fs::create_dir_all(dir)?;
    let spec = model.spec();
    let (h, w, _) = spec.truncation.backbone.input_shape;
    let meta = CheckpointMeta {
        backbone: spec.truncation.backbone.name.as_str().to_string(),
        cut_block_index: spec.truncation.cut_block_index,
        normalization: spec.truncation.backbone.name.normalization().key().to_string(),
        head: spec.head.key(),
        input_height: h,
        input_width: w,
        trainable_parameter_count: model.trainable_parameter_count(),
        train_config_hash: train_config_hash.to_string(),
        seed: model.store().seed(),
        best_val_loss,
    };
    model
        .store()
        .save_safetensors(&dir.join(WEIGHTS_FILE))
        .map_err(|e| CheckpointError::Mismatch(format!("weight save failed: {e}")))?;
    std::fs::write(dir.join(SIDECAR_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

/// Read and parse the sidecar only.
pub fn load_meta(dir: &Path) -> Result<CheckpointMeta, CheckpointError> {
    let path = dir.join(SIDECAR_FILE);
    if !path.is_file() {
        return Err(CheckpointError::NotFound(path));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Rebuild the model a sidecar describes and strictly load its weights.
pub fn load_checkpoint(dir: &Path) -> Result<(RegressionModel, CheckpointMeta), CheckpointError> {
    let meta = load_meta(dir)?;
    if meta.is_perfect_stub() {
        return Err(CheckpointError::Mismatch(
            "perfect-stub checkpoint has no weights to load".to_string(),
        ));
    }
    let name = BackboneName::parse(&meta.backbone)?;
    let declared_norm = Normalization::from_key(&meta.normalization)?;
    if declared_norm != name.normalization() {
        return Err(CheckpointError::Mismatch(format!(
            "normalization {} does not belong to backbone {}",
            meta.normalization, meta.backbone
        )));
    }
    let head = HeadSpec::parse(&meta.head)?;
    let backbone = BackboneSpec {
        name,
        pretrained: false,
        input_shape: (meta.input_height, meta.input_width, 3),
    };
    let spec = ModelSpec {
        truncation: TruncationSpec { backbone, cut_block_index: meta.cut_block_index },
        head,
    };
    let model = spec.build(meta.seed)?;
    if model.trainable_parameter_count() != meta.trainable_parameter_count {
        return Err(CheckpointError::Mismatch(format!(
            "sidecar declares {} trainable parameters, architecture has {}",
            meta.trainable_parameter_count,
            model.trainable_parameter_count()
        )));
    }
    let weights = dir.join(WEIGHTS_FILE);
    if !weights.is_file() {
        return Err(CheckpointError::NotFound(weights));
    }
    model
        .store()
        .load_safetensors_strict(&weights)
        .map_err(|e| CheckpointError::Mismatch(format!("weights do not match architecture: {e}")))?;
    Ok((model, meta))
}

/// Write a sidecar-only perfect-stub checkpoint (evaluation test hook).
pub fn save_perfect_stub(dir: &Path, train_config_hash: &str) -> Result<CheckpointMeta, CheckpointError> {
    std::fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        backbone: PERFECT_STUB_BACKBONE.to_string(),
        cut_block_index: None,
        normalization: Normalization::ScaleMinusOneToOne.key().to_string(),
        head: HeadSpec::Direct.key(),
        input_height: crate::dataset::INPUT_SIZE,
        input_width: crate::dataset::INPUT_SIZE,
        trainable_parameter_count: 0,
        train_config_hash: train_config_hash.to_string(),
        seed: 0,
        best_val_loss: None,
    };
    std::fs::write(dir.join(SIDECAR_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}
