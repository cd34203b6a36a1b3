//! Assembly of a feature extractor and a regression head into a trainable
//! age-estimation model with a single scalar output (years).
//!
//! Three head shapes are supported:
//! * `Direct` — global average pooling straight into a 1-unit affine layer,
//!   the minimal head (769 parameters on a 768-channel feature map).
//! * `Hidden(width)` — pooling, one ReLU hidden layer, then the 1-unit
//!   output; with the default width of 300 this reproduces the published
//!   truncated-model parameter counts.
//! * `Classifier` — the backbone's canonical classifier stage re-activated
//!   as a plain ReLU hidden layer (its 1000-way output becomes a hidden
//!   layer), then the 1-unit output; this reproduces the published
//!   full-model parameter counts.

use candle_core::Tensor;
use thiserror::Error;

use crate::backbones::{
    build_extractor, BackboneError, BackboneName, BackboneSpec, FeatureExtractor, TruncationSpec,
};
use crate::nn::{adaptive_avg_pool2d, global_avg_pool, Dense};

/// Width of the hidden layer that reproduces the published truncated-model
/// parameter counts.
pub const HIDDEN_WIDTH: usize = 300;

/// Width of the canonical classifier stage (1000-way in every supported
/// backbone's reference implementation).
const CLASSIFIER_WIDTH: usize = 1000;

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("feature shape {got:?} incompatible with head: {detail}")]
    IncompatibleFeatureShape { got: (usize, usize, usize), detail: String },
    #[error("input shape mismatch: expected {expected}, got {got:?}")]
    ShapeMismatch { expected: String, got: Vec<usize> },
    #[error("unknown head kind {0:?} (expected direct, hidden, or classifier)")]
    UnknownHead(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("tensor operation failed: {0}")]
    Tensor(#[from] candle_core::Error),
}

/// Which regression head to attach on top of the feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSpec {
    /// Global average pooling → 1-unit affine layer (identity activation).
    Direct,
    /// Global average pooling → ReLU hidden layer of this width → 1 unit.
    Hidden(usize),
    /// The backbone's classifier stage as a ReLU hidden stack → 1 unit.
    Classifier,
}

impl HeadSpec {
    /// Stable string key used in checkpoint sidecars.
    pub fn key(&self) -> String {
        match self {
            HeadSpec::Direct => "direct".to_string(),
            HeadSpec::Hidden(w) => format!("hidden:{w}"),
            HeadSpec::Classifier => "classifier".to_string(),
        }
    }

    pub fn parse(s: &str) -> Result<Self, RegressorError> {
        match s {
            "direct" => Ok(HeadSpec::Direct),
            "classifier" => Ok(HeadSpec::Classifier),
            _ => match s.strip_prefix("hidden:").and_then(|w| w.parse::<usize>().ok()) {
                Some(w) if w > 0 => Ok(HeadSpec::Hidden(w)),
                _ => Err(RegressorError::UnknownHead(s.to_string())),
            },
        }
    }
}

/// Complete recipe for a model: backbone (+ optional truncation) and head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub truncation: TruncationSpec,
    pub head: HeadSpec,
}

impl ModelSpec {
    /// The head pairing that reproduces the published parameter counts:
    /// truncated models get the 300-wide hidden head, full models keep
    /// their classifier stage.
    pub fn reference(name: BackboneName, cut_block_index: Option<u8>) -> Self {
        let backbone = BackboneSpec::new(name);
        match cut_block_index {
            Some(k) => ModelSpec {
                truncation: TruncationSpec::cut(backbone, k),
                head: HeadSpec::Hidden(HIDDEN_WIDTH),
            },
            None => ModelSpec { truncation: TruncationSpec::full(backbone), head: HeadSpec::Classifier },
        }
    }

    pub fn build(&self, seed: u64) -> Result<RegressionModel, RegressorError> {
        let extractor = build_extractor(&self.truncation, seed)?;
        RegressionModel::with_head(extractor, self.head)
    }
}

enum Head {
    Direct { out: Dense },
    Hidden { hidden: Dense, out: Dense },
    GapClassifier { fc: Dense, out: Dense },
    /// Adaptive 7×7 average pool → flatten → the three fully connected
    /// layers of the classical 16-layer network's classifier, → 1 unit.
    VggClassifier { fc1: Dense, fc2: Dense, fc3: Dense, out: Dense },
}

/// A trainable age-estimation model: feature extractor plus regression head,
/// all parameters in one store.
pub struct RegressionModel {
    extractor: FeatureExtractor,
    head: Head,
    head_spec: HeadSpec,
}

/// Attach the minimal head (global average pooling → 1-unit affine layer).
pub fn assemble(extractor: FeatureExtractor) -> Result<RegressionModel, RegressorError> {
    RegressionModel::with_head(extractor, HeadSpec::Direct)
}

/// Run inference on a preprocessed NCHW batch; one predicted age per image.
pub fn predict(model: &RegressionModel, images: &Tensor) -> Result<Vec<f64>, RegressorError> {
    model.predict(images)
}

impl RegressionModel {
    pub fn with_head(
        mut extractor: FeatureExtractor,
        head_spec: HeadSpec,
    ) -> Result<Self, RegressorError> {
        let out_shape = extractor.output_shape();
        let (_, _, channels) = out_shape;
        let bad = |detail: String| RegressorError::IncompatibleFeatureShape {
            got: out_shape,
            detail,
        };
        if channels == 0 {
            return Err(bad("zero-channel feature map".to_string()));
        }
        let name = extractor.name();
        let store = extractor.store_mut();
        let head = match head_spec {
            HeadSpec::Direct => Head::Direct { out: Dense::new(store, "head.output", channels, 1)? },
            HeadSpec::Hidden(width) => {
                if width == 0 {
                    return Err(bad("hidden head width must be positive".to_string()));
                }
                Head::Hidden {
                    hidden: Dense::new(store, "head.hidden", channels, width)?,
                    out: Dense::new(store, "head.output", width, 1)?,
                }
            }
            HeadSpec::Classifier => match name {
                BackboneName::Vgg16 => {
                    let flat = 7 * 7 * channels;
                    Head::VggClassifier {
                        fc1: Dense::new(store, "head.fc1", flat, 4096)?,
                        fc2: Dense::new(store, "head.fc2", 4096, 4096)?,
                        fc3: Dense::new(store, "head.fc3", 4096, CLASSIFIER_WIDTH)?,
                        out: Dense::new(store, "head.output", CLASSIFIER_WIDTH, 1)?,
                    }
                }
                _ => Head::GapClassifier {
                    fc: Dense::new(store, "head.classifier", channels, CLASSIFIER_WIDTH)?,
                    out: Dense::new(store, "head.output", CLASSIFIER_WIDTH, 1)?,
                },
            },
        };
        Ok(Self { extractor, head, head_spec })
    }

    /// Extractor forward only: the convolutional feature map (NCHW).
    pub fn features(&self, x: &Tensor, training: bool) -> Result<Tensor, RegressorError> {
        Ok(self.extractor.forward(x, training)?)
    }

    /// Head forward only: feature map (NCHW) → (B, 1) predictions.
    pub fn head_forward(&self, features: &Tensor, _training: bool) -> Result<Tensor, RegressorError> {
        let pooled_out = |out: &Dense, h: &Tensor| -> candle_core::Result<Tensor> {
            out.forward(h)
        };
        let y = match &self.head {
            Head::Direct { out } => pooled_out(out, &global_avg_pool(features)?)?,
            Head::Hidden { hidden, out } => {
                let h = hidden.forward(&global_avg_pool(features)?)?.relu()?;
                pooled_out(out, &h)?
            }
            Head::GapClassifier { fc, out } => {
                let h = fc.forward(&global_avg_pool(features)?)?.relu()?;
                pooled_out(out, &h)?
            }
            Head::VggClassifier { fc1, fc2, fc3, out } => {
                let pooled = adaptive_avg_pool2d(features, 7, 7)?;
                let (b, c, _, _) = pooled.dims4()?;
                let flat = pooled.reshape((b, c * 49))?;
                let h = fc1.forward(&flat)?.relu()?;
                let h = fc2.forward(&h)?.relu()?;
                let h = fc3.forward(&h)?.relu()?;
                pooled_out(out, &h)?
            }
        };
        Ok(y)
    }

    /// Full forward: NCHW image batch → (B, 1) predicted ages.
    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor, RegressorError> {
        let features = self.features(x, training)?;
        self.head_forward(&features, training)
    }

    /// Validated inference: one finite predicted age (years) per image.
    /// Never mutates weights; expects input preprocessed for this backbone.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<f64>, RegressorError> {
        let dims = images.dims().to_vec();
        let (ih, iw, ic) = self.extractor.input_shape();
        if dims.len() != 4 || dims[1] != ic || dims[2] != ih || dims[3] != iw {
            return Err(RegressorError::ShapeMismatch {
                expected: format!("(B, {ic}, {ih}, {iw})"),
                got: dims,
            });
        }
        let y = self.forward(images, false)?;
        let v: Vec<f32> = y.flatten_all()?.to_vec1()?;
        Ok(v.into_iter().map(|x| x as f64).collect())
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn head_spec(&self) -> HeadSpec {
        self.head_spec
    }

    /// The model recipe (enough to rebuild the architecture).
    pub fn spec(&self) -> ModelSpec {
        let backbone = BackboneSpec {
            name: self.extractor.name(),
            pretrained: false,
            input_shape: self.extractor.input_shape(),
        };
        ModelSpec {
            truncation: TruncationSpec {
                backbone,
                cut_block_index: self.extractor.cut_block_index(),
            },
            head: self.head_spec,
        }
    }

    /// Row label for sweep reports (e.g. `InceptionV3Mixed_04` or `VGG16`).
    pub fn label(&self) -> String {
        match self.extractor.cut_block_index() {
            Some(k) => format!("{}Mixed_{k:02}", self.extractor.name().table_label()),
            None => self.extractor.name().table_label().to_string(),
        }
    }

    pub fn store(&self) -> &crate::nn::ParamStore {
        self.extractor.store()
    }

    pub fn store_mut(&mut self) -> &mut crate::nn::ParamStore {
        self.extractor.store_mut()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.extractor.trainable_parameter_count()
    }

    /// The output affine layer (used by explanation code and tests).
    pub fn output_layer(&self) -> &Dense {
        match &self.head {
            Head::Direct { out }
            | Head::Hidden { out, .. }
            | Head::GapClassifier { out, .. }
            | Head::VggClassifier { out, .. } => out,
        }
    }
}

impl std::fmt::Debug for RegressionModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RegressionModel")
            .field("label", &self.label())
            .field("head", &self.head_spec)
            .field("trainable_parameter_count", &self.trainable_parameter_count())
            .finish()
    }
}
