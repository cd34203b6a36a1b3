//! The six convolutional feature extractors and the block-truncation
//! mechanism for the inception-style network.
//!
//! Every backbone ends at its last convolutional feature map (no classifier)
//! and is built fully convolutional, so any input of at least the stem's
//! minimum size works. All parameters are trainable (full fine-tuning).
//! Construction is deterministic: initialization depends only on
//! `(seed, parameter name)`, so a truncated network's retained layers are
//! bit-identical to the full network built from the same seed — the same
//! property pretrained weights would have.

mod densenet;
mod efficientnet;
mod inception;
mod mobilenet;
mod resnet;
mod vgg;

use candle_core::Tensor;
use thiserror::Error;

use crate::dataset::Normalization;
use crate::nn::ParamStore;

/// Environment variable pointing at a directory of pretrained weight files
/// (`<backbone>.safetensors`, keys matching this implementation's parameter
/// names).
pub const WEIGHTS_DIR_ENV: &str = "DENTAGE_WEIGHTS_DIR";

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("pretrained weights unavailable for {name}: {detail}")]
    WeightsUnavailable { name: String, detail: String },
    #[error("unsupported input shape {got:?}: {detail}")]
    UnsupportedInputShape { got: (usize, usize, usize), detail: String },
    #[error("cut block index {index} outside [{min}, {max}]")]
    IndexOutOfRange { index: u8, min: u8, max: u8 },
    #[error("backbone construction failed: {0}")]
    Build(#[from] candle_core::Error),
    #[error("unknown backbone name {0:?}")]
    UnknownName(String),
}

/// The six supported architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneName {
    InceptionV3,
    MobileNetV2,
    ResNet50V2,
    EfficientNetB4,
    Vgg16,
    DenseNet201,
}

impl BackboneName {
    pub const ALL: [BackboneName; 6] = [
        BackboneName::InceptionV3,
        BackboneName::MobileNetV2,
        BackboneName::ResNet50V2,
        BackboneName::EfficientNetB4,
        BackboneName::Vgg16,
        BackboneName::DenseNet201,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneName::InceptionV3 => "inception_v3",
            BackboneName::MobileNetV2 => "mobilenet_v2",
            BackboneName::ResNet50V2 => "resnet50_v2",
            BackboneName::EfficientNetB4 => "efficientnet_b4",
            BackboneName::Vgg16 => "vgg16",
            BackboneName::DenseNet201 => "densenet201",
        }
    }

    /// Canonical mixed-case label used in sweep-report rows.
    pub fn table_label(&self) -> &'static str {
        match self {
            BackboneName::InceptionV3 => "InceptionV3",
            BackboneName::MobileNetV2 => "MobileNetV2",
            BackboneName::ResNet50V2 => "ResNet50V2",
            BackboneName::EfficientNetB4 => "EfficientNetB4",
            BackboneName::Vgg16 => "VGG16",
            BackboneName::DenseNet201 => "DenseNet201",
        }
    }

    pub fn parse(s: &str) -> Result<Self, BackboneError> {
        Self::ALL
            .iter()
            .copied()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| BackboneError::UnknownName(s.to_string()))
    }

    /// The input normalization this backbone's pretrained weights expect.
    pub fn normalization(&self) -> Normalization {
        match self {
            BackboneName::InceptionV3
            | BackboneName::MobileNetV2
            | BackboneName::ResNet50V2 => Normalization::ScaleMinusOneToOne,
            BackboneName::EfficientNetB4 | BackboneName::DenseNet201 => {
                Normalization::ImagenetMeanStd
            }
            BackboneName::Vgg16 => Normalization::CaffeBgrMeanSubtract,
        }
    }

    /// Smallest square input the architecture accepts.
    pub fn min_input(&self) -> usize {
        match self {
            BackboneName::InceptionV3 => 75,
            _ => 32,
        }
    }
}

/// Which backbone to build, whether to load pretrained weights, and the
/// input shape (height, width, channels).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneSpec {
    pub name: BackboneName,
    pub pretrained: bool,
    pub input_shape: (usize, usize, usize),
}

impl BackboneSpec {
    pub fn new(name: BackboneName) -> Self {
        Self { name, pretrained: false, input_shape: (crate::dataset::INPUT_SIZE, crate::dataset::INPUT_SIZE, 3) }
    }

    fn validate(&self) -> Result<(), BackboneError> {
        let (h, w, c) = self.input_shape;
        let min = self.name.min_input();
        if c != 3 || h < min || w < min {
            return Err(BackboneError::UnsupportedInputShape {
                got: self.input_shape,
                detail: format!("{} needs (≥{min}, ≥{min}, 3)", self.name.as_str()),
            });
        }
        Ok(())
    }
}

/// A backbone plus an optional truncation point (inception-style network
/// only): `Some(k)` keeps the stem and mixed blocks 0..=k.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TruncationSpec {
    pub backbone: BackboneSpec,
    pub cut_block_index: Option<u8>,
}

pub const CUT_MIN: u8 = 3;
pub const CUT_MAX: u8 = 9;

impl TruncationSpec {
    pub fn full(backbone: BackboneSpec) -> Self {
        Self { backbone, cut_block_index: None }
    }

    pub fn cut(backbone: BackboneSpec, k: u8) -> Self {
        Self { backbone, cut_block_index: Some(k) }
    }

    fn validate(&self) -> Result<(), BackboneError> {
        self.backbone.validate()?;
        if let Some(k) = self.cut_block_index {
            if self.backbone.name != BackboneName::InceptionV3 {
                return Err(BackboneError::UnsupportedInputShape {
                    got: self.backbone.input_shape,
                    detail: format!(
                        "truncation is only defined for inception_v3, not {}",
                        self.backbone.name.as_str()
                    ),
                });
            }
            if !(CUT_MIN..=CUT_MAX).contains(&k) {
                return Err(BackboneError::IndexOutOfRange { index: k, min: CUT_MIN, max: CUT_MAX });
            }
        }
        Ok(())
    }
}

pub(crate) trait Net: Send + Sync {
    fn forward(&self, x: &Tensor, training: bool) -> candle_core::Result<Tensor>;
}

/// A built feature extractor: the network with its parameter store and
/// output geometry.
pub struct FeatureExtractor {
    name: BackboneName,
    cut_block_index: Option<u8>,
    input_shape: (usize, usize, usize),
    store: ParamStore,
    net: Box<dyn Net>,
    /// (height, width, channels) of the final feature map.
    output_shape: (usize, usize, usize),
}

impl FeatureExtractor {
    /// Run the extractor on an NCHW batch; returns the NCHW feature map.
    pub fn forward(&self, x: &Tensor, training: bool) -> candle_core::Result<Tensor> {
        self.net.forward(x, training)
    }

    pub fn name(&self) -> BackboneName {
        self.name
    }

    pub fn cut_block_index(&self) -> Option<u8> {
        self.cut_block_index
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    /// (height, width, channels) of the output feature map.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        self.output_shape
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.store.trainable_parameter_count()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("name", &self.name)
            .field("cut_block_index", &self.cut_block_index)
            .field("output_shape", &self.output_shape)
            .field("trainable_parameter_count", &self.trainable_parameter_count())
            .finish()
    }
}

fn load_pretrained(store: &ParamStore, name: BackboneName) -> Result<(), BackboneError> {
    let err = |detail: String| BackboneError::WeightsUnavailable {
        name: name.as_str().to_string(),
        detail,
    };
    let dir = std::env::var_os(WEIGHTS_DIR_ENV).ok_or_else(|| {
        err(format!("no local weight cache configured ({WEIGHTS_DIR_ENV} unset) and offline mode has no fetch path"))
    })?;
    let path = std::path::Path::new(&dir).join(format!("{}.safetensors", name.as_str()));
    if !path.is_file() {
        return Err(err(format!("weight file {} not found", path.display())));
    }
    store.load_safetensors_strict(&path).map_err(|e| err(e.to_string()))
}

/// Build a full (untruncated) backbone.
pub fn build_backbone(spec: &BackboneSpec, seed: u64) -> Result<FeatureExtractor, BackboneError> {
    build_extractor(&TruncationSpec::full(*spec), seed)
}

/// Build the inception-style network truncated after mixed block
/// `cut_block_index` (3..=9), at the native input size.
pub fn truncate_inception(
    cut_block_index: u8,
    pretrained: bool,
    seed: u64,
) -> Result<FeatureExtractor, BackboneError> {
    let mut backbone = BackboneSpec::new(BackboneName::InceptionV3);
    backbone.pretrained = pretrained;
    build_extractor(&TruncationSpec::cut(backbone, cut_block_index), seed)
}

/// General entry point: full or truncated backbone per the spec.
pub fn build_extractor(spec: &TruncationSpec, seed: u64) -> Result<FeatureExtractor, BackboneError> {
    spec.validate()?;
    let (h, w, _) = spec.backbone.input_shape;
    let mut store = ParamStore::new(seed);
    let name = spec.backbone.name;
    let (net, output_shape): (Box<dyn Net>, (usize, usize, usize)) = match name {
        BackboneName::InceptionV3 => {
            let keep = spec.cut_block_index.map(|k| k as usize).unwrap_or(10);
            let (net, out) = inception::build(&mut store, keep, (h, w))?;
            (Box::new(net), out)
        }
        BackboneName::MobileNetV2 => {
            let (net, out) = mobilenet::build(&mut store, (h, w))?;
            (Box::new(net), out)
        }
        BackboneName::ResNet50V2 => {
            let (net, out) = resnet::build(&mut store, (h, w))?;
            (Box::new(net), out)
        }
        BackboneName::EfficientNetB4 => {
            let (net, out) = efficientnet::build(&mut store, (h, w))?;
            (Box::new(net), out)
        }
        BackboneName::Vgg16 => {
            let (net, out) = vgg::build(&mut store, (h, w))?;
            (Box::new(net), out)
        }
        BackboneName::DenseNet201 => {
            let (net, out) = densenet::build(&mut store, (h, w))?;
            (Box::new(net), out)
        }
    };
    if spec.backbone.pretrained {
        load_pretrained(&store, name)?;
    }
    Ok(FeatureExtractor {
        name,
        cut_block_index: spec.cut_block_index,
        input_shape: spec.backbone.input_shape,
        store,
        net,
        output_shape,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_only_for_inception() {
        let spec = TruncationSpec::cut(BackboneSpec::new(BackboneName::Vgg16), 4);
        assert!(build_extractor(&spec, 1).is_err());
    }

    #[test]
    fn cut_index_bounds() {
        for bad in [0u8, 1, 2, 10, 11] {
            match truncate_inception(bad, false, 1).unwrap_err() {
                BackboneError::IndexOutOfRange { index, min: 3, max: 9 } => assert_eq!(index, bad),
                e => panic!("unexpected error {e:?}"),
            }
        }
    }

    #[test]
    fn input_shape_validation() {
        let mut spec = BackboneSpec::new(BackboneName::InceptionV3);
        spec.input_shape = (64, 64, 3);
        assert!(matches!(
            build_backbone(&spec, 1).unwrap_err(),
            BackboneError::UnsupportedInputShape { .. }
        ));
        let mut spec = BackboneSpec::new(BackboneName::Vgg16);
        spec.input_shape = (256, 256, 1);
        assert!(matches!(
            build_backbone(&spec, 1).unwrap_err(),
            BackboneError::UnsupportedInputShape { .. }
        ));
    }

    #[test]
    fn pretrained_without_cache_fails_fast() {
        // The environment variable is absent in the test environment.
        let mut spec = BackboneSpec::new(BackboneName::MobileNetV2);
        spec.pretrained = true;
        match build_backbone(&spec, 1) {
            Err(BackboneError::WeightsUnavailable { name, .. }) => {
                assert_eq!(name, "mobilenet_v2")
            }
            other => panic!("expected WeightsUnavailable, got {other:?}"),
        }
    }

    #[test]
    fn names_roundtrip_and_cover_normalizations() {
        for n in BackboneName::ALL {
            assert_eq!(BackboneName::parse(n.as_str()).unwrap(), n);
            let _ = n.normalization(); // every name maps to a normalization
        }
        assert!(BackboneName::parse("alexnet").is_err());
    }
}
