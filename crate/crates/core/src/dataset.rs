//! Radiograph corpus ingestion: CSV manifest parsing, deterministic
//! age-stratified train/val/test splitting, and image loading with
//! per-backbone input normalization.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::nn::rng_for;
use rand::seq::SliceRandom;

/// Native input resolution of the pipeline.
pub const INPUT_SIZE: usize = 256;

/// Age bounds accepted by default when reading a manifest, matching the
/// cohort this pipeline targets. Override with
/// [`load_manifest_with_bounds`] for other cohorts.
pub const DEFAULT_AGE_BOUNDS: (f64, f64) = (8.0, 68.0);

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest or image file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("manifest row {row}: age {value:?} is not numeric")]
    NonNumericAge { row: usize, value: String },
    #[error("manifest row {row}: age {age} outside configured bounds [{min}, {max}]")]
    AgeOutOfConfiguredBounds { row: usize, age: f64, min: f64, max: f64 },
    #[error("split counts sum to {requested} but the dataset has {available} records")]
    CountMismatch { requested: usize, available: usize },
    #[error("failed to decode image {path}: {reason}")]
    DecodeFailure { path: PathBuf, reason: String },
    #[error("unknown normalization key {0:?}")]
    UnknownNormalizationKey(String),
}

/// Which split a record has been assigned to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

/// One labeled radiograph.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_path: PathBuf,
    pub age_years: f64,
    pub subject_id: Option<String>,
    pub split: Split,
}

/// A finished deterministic split of the corpus.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
    pub seed: u64,
}

/// Input normalization conventions used by the supported backbones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Map [0,1] to [-1,1].
    ScaleMinusOneToOne,
    /// Subtract the standard per-channel RGB mean and divide by the standard
    /// deviation, on [0,1] inputs.
    ImagenetMeanStd,
    /// Flip RGB to BGR, scale to [0,255], subtract per-channel means
    /// (103.939, 116.779, 123.68).
    CaffeBgrMeanSubtract,
}

impl Normalization {
    pub fn key(&self) -> &'static str {
        match self {
            Normalization::ScaleMinusOneToOne => "scale_minus_one_to_one",
            Normalization::ImagenetMeanStd => "imagenet_mean_std",
            Normalization::CaffeBgrMeanSubtract => "caffe_bgr_mean_subtract",
        }
    }

    pub fn from_key(key: &str) -> Result<Self, DatasetError> {
        match key {
            "scale_minus_one_to_one" => Ok(Normalization::ScaleMinusOneToOne),
            "imagenet_mean_std" => Ok(Normalization::ImagenetMeanStd),
            "caffe_bgr_mean_subtract" => Ok(Normalization::CaffeBgrMeanSubtract),
            other => Err(DatasetError::UnknownNormalizationKey(other.to_string())),
        }
    }

    /// Apply in place to an HWC image whose values are in [0,1].
    pub fn apply(&self, img: &mut Image32) {
        let c = img.channels;
        match self {
            Normalization::ScaleMinusOneToOne => {
                for v in &mut img.data {
                    *v = *v * 2.0 - 1.0;
                }
            }
            Normalization::ImagenetMeanStd => {
                const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
                const STD: [f32; 3] = [0.229, 0.224, 0.225];
                for (i, v) in img.data.iter_mut().enumerate() {
                    let ch = i % c;
                    *v = (*v - MEAN[ch]) / STD[ch];
                }
            }
            Normalization::CaffeBgrMeanSubtract => {
                const MEAN_BGR: [f32; 3] = [103.939, 116.779, 123.68];
                for px in img.data.chunks_mut(c) {
                    px.swap(0, 2); // RGB → BGR
                    for (ch, v) in px.iter_mut().enumerate() {
                        *v = *v * 255.0 - MEAN_BGR[ch];
                    }
                }
            }
        }
    }

    /// Exact inverse of [`Normalization::apply`]: recover the [0,1] image.
    pub fn invert(&self, img: &mut Image32) {
        let c = img.channels;
        match self {
            Normalization::ScaleMinusOneToOne => {
                for v in &mut img.data {
                    *v = (*v + 1.0) / 2.0;
                }
            }
            Normalization::ImagenetMeanStd => {
                const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
                const STD: [f32; 3] = [0.229, 0.224, 0.225];
                for (i, v) in img.data.iter_mut().enumerate() {
                    let ch = i % c;
                    *v = *v * STD[ch] + MEAN[ch];
                }
            }
            Normalization::CaffeBgrMeanSubtract => {
                const MEAN_BGR: [f32; 3] = [103.939, 116.779, 123.68];
                for px in img.data.chunks_mut(c) {
                    for (ch, v) in px.iter_mut().enumerate() {
                        *v = (*v + MEAN_BGR[ch]) / 255.0;
                    }
                    px.swap(0, 2); // BGR → RGB
                }
            }
        }
    }
}

/// How to produce 3 channels from the stored raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelPolicy {
    ReplicateGrayTo3,
    PassthroughRgb,
}

/// Full preprocessing recipe for one backbone's input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessSpec {
    pub target_height: usize,
    pub target_width: usize,
    pub channel_policy: ChannelPolicy,
    pub normalization: Normalization,
}

impl PreprocessSpec {
    pub fn new(normalization: Normalization) -> Self {
        Self {
            target_height: INPUT_SIZE,
            target_width: INPUT_SIZE,
            channel_policy: ChannelPolicy::ReplicateGrayTo3,
            normalization,
        }
    }
}

/// A dense HWC f32 image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image32 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image32 {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * channels);
        Self { height, width, channels, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Replicate a single-channel image to `n` identical channels.
    pub fn replicate_channels(&self, n: usize) -> Image32 {
        assert_eq!(self.channels, 1, "replicate_channels expects a single-channel image");
        let mut out = Image32::new(self.height, self.width, n);
        for (i, &v) in self.data.iter().enumerate() {
            for c in 0..n {
                out.data[i * n + c] = v;
            }
        }
        out
    }

    /// Channel-first flattening (C·H·W order) for tensor construction.
    pub fn to_chw_vec(&self) -> Vec<f32> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0f32; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[ch * h * w + y * w + x] = self.get(y, x, ch);
                }
            }
        }
        out
    }
}

/// Read a manifest with the default age bounds.
pub fn load_manifest(manifest_path: &Path) -> Result<Vec<ImageRecord>, DatasetError> {
    load_manifest_with_bounds(manifest_path, DEFAULT_AGE_BOUNDS.0, DEFAULT_AGE_BOUNDS.1)
}

/// Read a UTF-8 CSV manifest (`image_path,age_years[,subject_id]`) into
/// records with `split = Unassigned`, preserving row order. Image paths are
/// resolved relative to the manifest's directory. Row indices in errors are
/// 1-based data rows (the header is row 0).
pub fn load_manifest_with_bounds(
    manifest_path: &Path,
    min_age: f64,
    max_age: f64,
) -> Result<Vec<ImageRecord>, DatasetError> {
    if !manifest_path.is_file() {
        return Err(DatasetError::MissingFile(manifest_path.to_path_buf()));
    }
    let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(manifest_path)
        .map_err(|e| DatasetError::MalformedRow { row: 0, reason: e.to_string() })?;

    let headers = reader
        .headers()
        .map_err(|e| DatasetError::MalformedRow { row: 0, reason: e.to_string() })?
        .clone();
    let cols: Vec<&str> = headers.iter().map(str::trim).collect();
    let header_ok = (cols.len() == 2 || cols.len() == 3)
        && cols[0] == "image_path"
        && cols[1] == "age_years"
        && (cols.len() == 2 || cols[2] == "subject_id");
    if !header_ok {
        return Err(DatasetError::MalformedRow {
            row: 0,
            reason: format!("expected header image_path,age_years[,subject_id], got {cols:?}"),
        });
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_idx = i + 1;
        let row = row.map_err(|e| DatasetError::MalformedRow { row: row_idx, reason: e.to_string() })?;
        if row.len() < 2 || row.len() > 3 {
            return Err(DatasetError::MalformedRow {
                row: row_idx,
                reason: format!("expected 2 or 3 fields, got {}", row.len()),
            });
        }
        let path_field = row.get(0).unwrap_or("").trim();
        if path_field.is_empty() {
            return Err(DatasetError::MalformedRow { row: row_idx, reason: "empty image_path".into() });
        }
        let age_field = row.get(1).unwrap_or("").trim();
        let age: f64 = age_field.parse().map_err(|_| DatasetError::NonNumericAge {
            row: row_idx,
            value: age_field.to_string(),
        })?;
        if !age.is_finite() {
            return Err(DatasetError::NonNumericAge { row: row_idx, value: age_field.to_string() });
        }
        if age < min_age || age > max_age {
            return Err(DatasetError::AgeOutOfConfiguredBounds {
                row: row_idx,
                age,
                min: min_age,
                max: max_age,
            });
        }
        let subject_id = row.get(2).map(str::trim).filter(|s| !s.is_empty()).map(String::from);
        let rel = Path::new(path_field);
        let image_path = if rel.is_absolute() { rel.to_path_buf() } else { base.join(rel) };
        records.push(ImageRecord { image_path, age_years: age, subject_id, split: Split::Unassigned });
    }
    Ok(records)
}

/// Deterministic age-stratified split with exact part sizes.
///
/// Records are grouped into 10-year age bins; each bin is shuffled with an
/// rng derived from `(seed, bin)` and carved into per-bin quotas computed by
/// floor division plus largest-remainder rounding, so every part hits its
/// requested count exactly while each bin is divided near-proportionally.
pub fn split_dataset(
    records: &[ImageRecord],
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    let (train_n, val_n, test_n) = counts;
    let total = train_n + val_n + test_n;
    if total != records.len() {
        return Err(DatasetError::CountMismatch { requested: total, available: records.len() });
    }

    // Group record indices by age decade, keys in ascending order.
    let mut bins: std::collections::BTreeMap<i64, Vec<usize>> = std::collections::BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        bins.entry((r.age_years / 10.0).floor() as i64).or_default().push(i);
    }
    let bin_keys: Vec<i64> = bins.keys().copied().collect();
    let n = records.len() as f64;
    let targets = [train_n, val_n, test_n];

    // Floor quotas and remainders per (bin, part).
    let mut quota: Vec<[usize; 3]> = Vec::with_capacity(bin_keys.len());
    let mut remainders: Vec<(f64, usize, usize)> = Vec::new(); // (frac, bin_idx, part)
    let mut assigned = [0usize; 3];
    for (bi, key) in bin_keys.iter().enumerate() {
        let size = bins[key].len() as f64;
        let mut q = [0usize; 3];
        for (p, &t) in targets.iter().enumerate() {
            let ideal = size * t as f64 / n;
            q[p] = ideal.floor() as usize;
            assigned[p] += q[p];
            remainders.push((ideal - ideal.floor(), bi, p));
        }
        quota.push(q);
    }
    let mut residual = [0usize; 3];
    for p in 0..3 {
        residual[p] = targets[p] - assigned[p];
    }
    let mut capacity: Vec<usize> = bin_keys
        .iter()
        .enumerate()
        .map(|(bi, key)| bins[&bin_keys[bi]].len() - quota[bi].iter().sum::<usize>().min(bins[key].len()))
        .collect();

    // Largest-remainder pass, then a deterministic sweep for anything left.
    remainders.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });
    for &(_, bi, p) in &remainders {
        if residual[p] > 0 && capacity[bi] > 0 {
            quota[bi][p] += 1;
            residual[p] -= 1;
            capacity[bi] -= 1;
        }
    }
    for p in 0..3 {
        while residual[p] > 0 {
            let bi = capacity
                .iter()
                .position(|&c| c > 0)
                .expect("split bookkeeping: residual left but no capacity");
            quota[bi][p] += 1;
            residual[p] -= 1;
            capacity[bi] -= 1;
        }
    }

    // Shuffle each bin and carve it by the quotas.
    let mut train = Vec::with_capacity(train_n);
    let mut val = Vec::with_capacity(val_n);
    let mut test = Vec::with_capacity(test_n);
    for (bi, key) in bin_keys.iter().enumerate() {
        let mut idx = bins[key].clone();
        let mut rng = rng_for(seed, &format!("split.bin.{key}"));
        idx.shuffle(&mut rng);
        let q = quota[bi];
        let mut it = idx.into_iter();
        for (part, out, count) in [
            (Split::Train, &mut train, q[0]),
            (Split::Val, &mut val, q[1]),
            (Split::Test, &mut test, q[2]),
        ] {
            for _ in 0..count {
                let mut r = records[it.next().expect("quota exceeds bin size")].clone();
                r.split = part;
                out.push(r);
            }
        }
    }
    debug_assert_eq!(train.len(), train_n);
    debug_assert_eq!(val.len(), val_n);
    debug_assert_eq!(test.len(), test_n);
    Ok(DatasetSplit { train, val, test, seed })
}

fn decode(path: &Path) -> Result<image::DynamicImage, DatasetError> {
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    image::ImageReader::open(path)
        .map_err(|e| DatasetError::DecodeFailure { path: path.to_path_buf(), reason: e.to_string() })?
        .decode()
        .map_err(|e| DatasetError::DecodeFailure { path: path.to_path_buf(), reason: e.to_string() })
}

/// Load a radiograph as a single-channel [0,1] image resized (bilinear, no
/// aspect preservation) to the given dimensions. This is the raw form the
/// augmentation stage operates on; normalization comes after.
pub fn load_gray_resized(path: &Path, height: usize, width: usize) -> Result<Image32, DatasetError> {
    let img = decode(path)?.to_luma32f();
    let resized =
        image::imageops::resize(&img, width as u32, height as u32, image::imageops::FilterType::Triangle);
    Ok(Image32::from_vec(height, width, 1, resized.into_raw()))
}

/// Load, resize, expand to 3 channels, and normalize — the deterministic
/// val/test/inference path (no augmentation).
pub fn load_and_preprocess(record: &ImageRecord, spec: &PreprocessSpec) -> Result<Image32, DatasetError> {
    let mut out = match spec.channel_policy {
        ChannelPolicy::ReplicateGrayTo3 => {
            load_gray_resized(&record.image_path, spec.target_height, spec.target_width)?
                .replicate_channels(3)
        }
        ChannelPolicy::PassthroughRgb => {
            let img = decode(&record.image_path)?.to_rgb32f();
            let resized = image::imageops::resize(
                &img,
                spec.target_width as u32,
                spec.target_height as u32,
                image::imageops::FilterType::Triangle,
            );
            Image32::from_vec(spec.target_height, spec.target_width, 3, resized.into_raw())
        }
    };
    spec.normalization.apply(&mut out);
    if let Some(bad) = out.data.iter().find(|v| !v.is_finite()) {
        return Err(DatasetError::DecodeFailure {
            path: record.image_path.clone(),
            reason: format!("non-finite pixel value {bad} after preprocessing"),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn record(path: &Path, age: f64) -> ImageRecord {
        ImageRecord {
            image_path: path.to_path_buf(),
            age_years: age,
            subject_id: None,
            split: Split::Unassigned,
        }
    }

    fn synthetic_records(n: usize) -> Vec<ImageRecord> {
        (0..n)
            .map(|i| record(Path::new(&format!("img_{i}.png")), 8.0 + (i % 61) as f64))
            .collect()
    }

    #[test]
    fn manifest_roundtrip_preserves_order_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("labels.csv");
        fs::write(
            &manifest,
            "image_path,age_years,subject_id\nimgs/a.png,14.5,s1\nimgs/b.png,60,\n/abs/c.png,33.25,s3\n",
        )
        .unwrap();
        let recs = load_manifest(&manifest).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].image_path, dir.path().join("imgs/a.png"));
        assert_eq!(recs[0].age_years, 14.5);
        assert_eq!(recs[0].subject_id.as_deref(), Some("s1"));
        assert_eq!(recs[1].subject_id, None);
        assert_eq!(recs[2].image_path, PathBuf::from("/abs/c.png"));
        assert!(recs.iter().all(|r| r.split == Split::Unassigned));
    }

    #[test]
    fn manifest_without_subject_column_parses() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("labels.csv");
        fs::write(&manifest, "image_path,age_years\r\na.png,20\r\nb.png,30\r\n").unwrap();
        let recs = load_manifest(&manifest).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].age_years, 30.0);
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("labels.csv");

        assert!(matches!(
            load_manifest(&dir.path().join("absent.csv")).unwrap_err(),
            DatasetError::MissingFile(_)
        ));

        fs::write(&manifest, "image_path,age_years\na.png,abc\n").unwrap();
        match load_manifest(&manifest).unwrap_err() {
            DatasetError::NonNumericAge { row, value } => {
                assert_eq!(row, 1);
                assert_eq!(value, "abc");
            }
            e => panic!("unexpected error {e:?}"),
        }

        fs::write(&manifest, "image_path,age_years\na.png,20\nb.png,150\n").unwrap();
        match load_manifest(&manifest).unwrap_err() {
            DatasetError::AgeOutOfConfiguredBounds { row, age, .. } => {
                assert_eq!(row, 2);
                assert_eq!(age, 150.0);
            }
            e => panic!("unexpected error {e:?}"),
        }
        // Wider bounds accept the same row.
        assert_eq!(load_manifest_with_bounds(&manifest, 1.0, 200.0).unwrap().len(), 2);

        fs::write(&manifest, "path,years\na.png,20\n").unwrap();
        assert!(matches!(
            load_manifest(&manifest).unwrap_err(),
            DatasetError::MalformedRow { row: 0, .. }
        ));

        fs::write(&manifest, "image_path,age_years\n,20\n").unwrap();
        assert!(matches!(
            load_manifest(&manifest).unwrap_err(),
            DatasetError::MalformedRow { row: 1, .. }
        ));
    }

    #[test]
    fn split_exact_counts_for_cohort_size() {
        let recs = synthetic_records(1332);
        let split = split_dataset(&recs, (962, 170, 200), 42).unwrap();
        assert_eq!(split.train.len(), 962);
        assert_eq!(split.val.len(), 170);
        assert_eq!(split.test.len(), 200);
    }

    #[test]
    fn split_is_a_partition() {
        let recs = synthetic_records(333);
        let split = split_dataset(&recs, (233, 50, 50), 7).unwrap();
        let mut seen: std::collections::HashSet<&Path> = std::collections::HashSet::new();
        for r in split.train.iter().chain(&split.val).chain(&split.test) {
            assert!(seen.insert(r.image_path.as_path()), "duplicate {:?}", r.image_path);
        }
        assert_eq!(seen.len(), 333);
        assert!(split.train.iter().all(|r| r.split == Split::Train));
        assert!(split.val.iter().all(|r| r.split == Split::Val));
        assert!(split.test.iter().all(|r| r.split == Split::Test));
    }

    #[test]
    fn split_deterministic_across_calls() {
        let recs = synthetic_records(500);
        let a = split_dataset(&recs, (350, 75, 75), 13).unwrap();
        let b = split_dataset(&recs, (350, 75, 75), 13).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
        // A different seed rearranges at least something.
        let c = split_dataset(&recs, (350, 75, 75), 14).unwrap();
        assert_ne!(
            a.train.iter().map(|r| &r.image_path).collect::<Vec<_>>(),
            c.train.iter().map(|r| &r.image_path).collect::<Vec<_>>()
        );
    }

    #[test]
    fn degenerate_split_puts_everything_in_train() {
        let recs = synthetic_records(40);
        let split = split_dataset(&recs, (40, 0, 0), 1).unwrap();
        assert_eq!(split.train.len(), 40);
        assert!(split.val.is_empty() && split.test.is_empty());
    }

    #[test]
    fn split_count_mismatch() {
        let recs = synthetic_records(10);
        assert!(matches!(
            split_dataset(&recs, (5, 5, 5), 1).unwrap_err(),
            DatasetError::CountMismatch { requested: 15, available: 10 }
        ));
    }

    #[test]
    fn split_stratification_tracks_global_fraction() {
        // Heavily skewed ages: most in their 20s, a sparse elderly bin.
        let mut recs = Vec::new();
        for i in 0..600 {
            recs.push(record(Path::new(&format!("y{i}.png")), 20.0 + (i % 10) as f64));
        }
        for i in 0..60 {
            recs.push(record(Path::new(&format!("o{i}.png")), 60.0 + (i % 8) as f64));
        }
        let split = split_dataset(&recs, (462, 99, 99), 3).unwrap();
        let global_train = 462.0 / 660.0;
        for (lo, hi) in [(20.0, 30.0), (60.0, 68.1)] {
            let in_bin = |r: &ImageRecord| r.age_years >= lo && r.age_years < hi;
            let bin_total = recs.iter().filter(|r| in_bin(r)).count() as f64;
            let bin_train = split.train.iter().filter(|r| in_bin(r)).count() as f64;
            let frac = bin_train / bin_total;
            assert!(
                (frac - global_train).abs() < 0.10,
                "bin [{lo},{hi}) train fraction {frac} vs global {global_train}"
            );
        }
    }

    fn write_png_gray(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
        let img = image::GrayImage::from_fn(w, h, |x, y| image::Luma([f(x, y)]));
        img.save(path).unwrap();
    }

    #[test]
    fn preprocess_shapes_and_finiteness() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("wide.png");
        write_png_gray(&p, 2000, 1000, |x, y| ((x + y) % 251) as u8);
        let rec = record(&p, 30.0);
        let spec = PreprocessSpec::new(Normalization::ScaleMinusOneToOne);
        let img = load_and_preprocess(&rec, &spec).unwrap();
        assert_eq!((img.height, img.width, img.channels), (256, 256, 3));
        assert!(img.data.iter().all(|v| v.is_finite()));
        assert!(img.data.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn preprocess_already_256_keeps_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sq.png");
        write_png_gray(&p, 256, 256, |x, _| (x % 256) as u8);
        let spec = PreprocessSpec::new(Normalization::ScaleMinusOneToOne);
        let img = load_and_preprocess(&record(&p, 30.0), &spec).unwrap();
        assert_eq!((img.height, img.width, img.channels), (256, 256, 3));
    }

    #[test]
    fn constant_image_mean_std_normalization_is_analytic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("const.png");
        write_png_gray(&p, 64, 64, |_, _| 128);
        let spec = PreprocessSpec::new(Normalization::ImagenetMeanStd);
        let img = load_and_preprocess(&record(&p, 30.0), &spec).unwrap();
        let v = 128.0 / 255.0;
        let want = [(v - 0.485) / 0.229, (v - 0.456) / 0.224, (v - 0.406) / 0.225];
        for ch in 0..3 {
            let got = img.get(10, 10, ch);
            assert!((got - want[ch]).abs() < 1e-4, "ch{ch}: {got} vs {}", want[ch]);
        }
    }

    #[test]
    fn caffe_normalization_flips_channels_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        let img = image::RgbImage::from_fn(32, 32, |_, _| image::Rgb([255, 128, 0]));
        img.save(&p).unwrap();
        let spec = PreprocessSpec {
            channel_policy: ChannelPolicy::PassthroughRgb,
            ..PreprocessSpec::new(Normalization::CaffeBgrMeanSubtract)
        };
        let out = load_and_preprocess(&record(&p, 30.0), &spec).unwrap();
        // Channel 0 is now blue (0·255 − 103.939), channel 2 is red.
        assert!((out.get(5, 5, 0) - (0.0 - 103.939)).abs() < 0.51);
        assert!((out.get(5, 5, 2) - (255.0 - 123.68)).abs() < 0.51);
    }

    #[test]
    fn normalization_keys_roundtrip() {
        for n in [
            Normalization::ScaleMinusOneToOne,
            Normalization::ImagenetMeanStd,
            Normalization::CaffeBgrMeanSubtract,
        ] {
            assert_eq!(Normalization::from_key(n.key()).unwrap(), n);
        }
        assert!(matches!(
            Normalization::from_key("zscore").unwrap_err(),
            DatasetError::UnknownNormalizationKey(_)
        ));
    }

    #[test]
    fn chw_layout_transposes_correctly() {
        let mut img = Image32::new(2, 2, 3);
        img.set(0, 1, 2, 7.0);
        img.set(1, 0, 0, 3.0);
        let chw = img.to_chw_vec();
        assert_eq!(chw[2 * 4 + 1], 7.0); // channel 2, y 0, x 1
        assert_eq!(chw[2], 3.0); // channel 0, y 1, x 0
    }
}
