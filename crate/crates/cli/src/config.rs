//! The experiment config file: a sectioned TOML document whose defaults
//! reproduce the reference protocol, so an empty file trains the standard
//! truncated model with the standard schedule.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dentage_core::{AugmentationConfig, BackboneName, ModelSpec, TrainingConfig, CUT_MAX, CUT_MIN};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Top-level experiment description. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory all artifacts are written under (overridable with `--out`).
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub augmentation: AugmentationConfig,
    pub model: ModelSection,
    pub training: TrainingConfig,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("dentage-out"),
            dataset: DatasetSection::default(),
            augmentation: AugmentationConfig::default(),
            model: ModelSection::default(),
            training: TrainingConfig::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Where the labeled images come from and how they are partitioned.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub manifest: PathBuf,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    /// Seed for the stratified split (not for weight init; see training.seed).
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.csv"),
            train_count: 962,
            val_count: 170,
            test_count: 200,
            seed: 42,
        }
    }
}

impl DatasetSection {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train_count, self.val_count, self.test_count)
    }
}

/// Which network to assemble. The default is the reference model: the
/// truncated deep backbone cut after block 4 with the standard head.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Backbone key: inception_v3, mobilenet_v2, resnet50_v2,
    /// efficientnet_b4, vgg16, densenet201.
    pub backbone: String,
    /// `4` keeps backbone blocks 0..=4; the string `"full"` keeps the whole
    /// backbone. Truncation indices are only defined for inception_v3.
    pub cut_block_index: CutSetting,
    /// Load pretrained backbone weights from the weight-cache directory
    /// (env `DENTAGE_WEIGHTS_DIR`) instead of random initialization.
    pub pretrained: bool,
    /// Square input side in pixels.
    pub input_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backbone: "inception_v3".to_string(),
            cut_block_index: CutSetting::Index(4),
            pretrained: false,
            input_size: 256,
        }
    }
}

/// Either a block index (`cut_block_index = 4`) or `"full"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CutSetting {
    Index(u8),
    Keyword(String),
}

impl CutSetting {
    fn resolve(&self) -> Result<Option<u8>> {
        match self {
            CutSetting::Index(k) => Ok(Some(*k)),
            CutSetting::Keyword(s) if s == "full" => Ok(None),
            CutSetting::Keyword(s) => {
                bail!("cut_block_index must be an integer or \"full\", got {s:?}")
            }
        }
    }
}

impl ModelSection {
    /// Validate and convert into a buildable model description.
    pub fn to_spec(&self) -> Result<ModelSpec> {
        let name = BackboneName::parse(&self.backbone)
            .map_err(|e| anyhow!("model.backbone: {e}"))?;
        let cut = self.cut_block_index.resolve()?;
        if let Some(k) = cut {
            if name != BackboneName::InceptionV3 {
                bail!(
                    "model.cut_block_index is only defined for inception_v3 (got backbone {})",
                    self.backbone
                );
            }
            if !(CUT_MIN..=CUT_MAX).contains(&k) {
                bail!("model.cut_block_index {k} outside {CUT_MIN}..={CUT_MAX}");
            }
        }
        if self.input_size < name.min_input() {
            bail!(
                "model.input_size {} below the {} minimum of {}",
                self.input_size,
                self.backbone,
                name.min_input()
            );
        }
        let mut spec = ModelSpec::reference(name, cut);
        spec.truncation.backbone.pretrained = self.pretrained;
        spec.truncation.backbone.input_shape = (self.input_size, self.input_size, 3);
        Ok(spec)
    }
}

/// Optional explicit model list for `sweep` (entries like `"vgg16"` or
/// `"inception_v3:4"`); the `--sweep backbones|cuts` presets ignore it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub models: Vec<String>,
}

/// Parse a sweep entry: `backbone` (full model) or `backbone:cut`.
pub fn parse_sweep_entry(entry: &str, base: &ModelSection) -> Result<ModelSpec> {
    let mut section = base.clone();
    match entry.split_once(':') {
        Some((name, cut)) => {
            section.backbone = name.trim().to_string();
            let k: u8 = cut
                .trim()
                .parse()
                .with_context(|| format!("sweep entry {entry:?}: cut index not an integer"))?;
            section.cut_block_index = CutSetting::Index(k);
        }
        None => {
            section.backbone = entry.trim().to_string();
            section.cut_block_index = CutSetting::Keyword("full".to_string());
        }
    }
    section.to_spec().with_context(|| format!("sweep entry {entry:?}"))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Consistency checks that do not touch the filesystem (the manifest
    /// path is checked by the commands that actually read it).
    pub fn validate(&self) -> Result<()> {
        self.model.to_spec()?;
        self.training.validate().map_err(|e| anyhow!("training: {e}"))?;
        self.augmentation
            .clone()
            .validated()
            .map_err(|e| anyhow!("augmentation: {e}"))?;
        if self.dataset.train_count == 0 || self.dataset.val_count == 0 {
            bail!("dataset: train_count and val_count must be positive");
        }
        Ok(())
    }
}

/// Hex digest identifying an effective configuration; stamped into every
/// artifact sidecar so outputs can be traced to the settings that made them.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serialization cannot fail");
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_reference_protocol() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.dataset.counts(), (962, 170, 200));
        assert_eq!(cfg.training.max_epochs, 500);
        assert_eq!(cfg.training.initial_lr, 1e-3);
        assert_eq!(cfg.training.plateau_patience, 7);
        assert_eq!(cfg.training.early_stop_patience, 25);
        let spec = cfg.model.to_spec().unwrap();
        assert_eq!(spec.truncation.cut_block_index, Some(4));
        assert_eq!(spec.truncation.backbone.input_shape, (256, 256, 3));
        assert!(!spec.truncation.backbone.pretrained);
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        assert!(toml::from_str::<ExperimentConfig>("banana = 1").is_err());
        assert!(toml::from_str::<ExperimentConfig>("[model]\nbanana = 1").is_err());
        assert!(toml::from_str::<ExperimentConfig>("[training]\nbanana = 1").is_err());
        assert!(toml::from_str::<ExperimentConfig>("[augmentation]\nbanana = 1").is_err());
    }

    #[test]
    fn cut_setting_full_and_bounds() {
        let cfg: ExperimentConfig =
            toml::from_str("[model]\ncut_block_index = \"full\"").unwrap();
        assert_eq!(cfg.model.to_spec().unwrap().truncation.cut_block_index, None);

        let cfg: ExperimentConfig = toml::from_str("[model]\ncut_block_index = 2").unwrap();
        assert!(cfg.model.to_spec().is_err());

        let cfg: ExperimentConfig =
            toml::from_str("[model]\nbackbone = \"vgg16\"\ncut_block_index = 4").unwrap();
        assert!(cfg.model.to_spec().is_err());

        let cfg: ExperimentConfig =
            toml::from_str("[model]\nbackbone = \"vgg16\"\ncut_block_index = \"full\"").unwrap();
        assert!(cfg.model.to_spec().is_ok());
    }

    #[test]
    fn sweep_entries_parse_to_specs() {
        let base = ModelSection { input_size: 256, ..ModelSection::default() };
        let spec = parse_sweep_entry("inception_v3:7", &base).unwrap();
        assert_eq!(spec.truncation.cut_block_index, Some(7));
        let spec = parse_sweep_entry("densenet201", &base).unwrap();
        assert_eq!(spec.truncation.cut_block_index, None);
        assert!(parse_sweep_entry("vgg16:3", &base).is_err());
        assert!(parse_sweep_entry("not_a_net", &base).is_err());
    }

    #[test]
    fn hash_tracks_effective_settings() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.training.seed = 43;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn augmentation_section_round_trips_defaults() {
        let cfg: ExperimentConfig = toml::from_str(
            "[augmentation]\nrotation_degrees = [-5.0, 5.0]\nbrightness_range = [0.70, 1.10]",
        )
        .unwrap();
        assert_eq!(cfg.augmentation, AugmentationConfig::default());
    }
}
