//! Core library for dental-age estimation from panoramic radiographs.
//!
//! The pipeline: load and preprocess radiographs, augment them, run a
//! (possibly truncated) convolutional backbone with a small regression head,
//! train with Adam under a plateau learning-rate schedule, report regression
//! metrics, and explain predictions with gradient-weighted class-activation
//! heatmaps. A synthetic radiograph generator with a known age signal makes
//! the whole pipeline testable end to end without clinical data.

pub mod augment;
pub mod backbones;
pub mod checkpoint;
pub mod dataset;
pub mod gradcam;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod regressor;
pub mod synth;
pub mod trainer;

pub use augment::{AugmentError, AugmentationConfig, AugmentationSample, FillPolicy};
pub use backbones::{
    build_backbone, build_extractor, truncate_inception, BackboneError, BackboneName,
    BackboneSpec, FeatureExtractor, TruncationSpec, CUT_MAX, CUT_MIN, WEIGHTS_DIR_ENV,
};
pub use checkpoint::{
    load_checkpoint, load_meta, save_checkpoint, save_perfect_stub, CheckpointError,
    CheckpointMeta, PERFECT_STUB_BACKBONE,
};
pub use dataset::{
    ChannelPolicy, DatasetError, DatasetSplit, Image32, ImageRecord, Normalization,
    PreprocessSpec, Split,
};
pub use gradcam::{
    attribution_map, explain_image, grad_cam, render_overlay, GradCamError, HeatmapOverlay,
    DEFAULT_TARGET_LAYER, OVERLAY_ALPHA,
};
pub use metrics::{EvaluationBatch, MetricsError, MetricsReport};
pub use plot::{age_histogram, prediction_scatter, save_image32_png, training_curves, PlotError};
pub use regressor::{
    assemble, predict, HeadSpec, ModelSpec, RegressionModel, RegressorError, HIDDEN_WIDTH,
};
pub use synth::{SignalSpec, SynthConfig, SynthError, SynthRecord};
pub use trainer::{
    evaluate_records, should_stop, simulate_schedule, step_scheduler, train, EpochRecord,
    TrainerError, TrainingConfig, TrainingState,
};
