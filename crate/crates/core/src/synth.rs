//! Synthetic panoramic-radiograph generator with a known, learnable age
//! signal.
//!
//! Each image shows two dental arches of capsule-shaped teeth on a soft
//! bone-band background. Three features carry age: the pulp-to-enamel
//! brightness ratio decreases affinely with age (the primary, exactly affine
//! signal — a stand-in for pulp-chamber narrowing), stippled texture density
//! increases with age, and teeth start going missing above a threshold age.
//! The latent features of every record are kept so an ordinary least-squares
//! oracle can verify the signal is recoverable before any network trains on
//! it.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::dataset::Image32;
use crate::nn::rng_for;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic-data config: {0}")]
    InvalidConfig(String),
    #[error("oracle fit needs at least {need} records, got {got}")]
    InsufficientData { got: usize, need: usize },
    #[error("failed to write synthetic dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to encode image: {0}")]
    Encode(String),
}

/// Parameters tying age to rendered features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalSpec {
    /// Pulp/enamel brightness ratio at the young end of the age range.
    pub pulp_ratio_young: f64,
    /// Pulp/enamel brightness ratio at the old end of the age range.
    pub pulp_ratio_old: f64,
    /// Multiplier on the age-linked stipple-texture density.
    pub texture_density_scale: f64,
    /// Age above which teeth start going missing.
    pub tooth_loss_threshold: f64,
}

impl Default for SignalSpec {
    fn default() -> Self {
        Self {
            pulp_ratio_young: 0.95,
            pulp_ratio_old: 0.35,
            texture_density_scale: 1.0,
            tooth_loss_threshold: 55.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub age_range: (f64, f64),
    /// Square output size in pixels. The pipeline's native size is 256;
    /// smaller sizes are for fast tests.
    pub image_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub signal: SignalSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 200,
            age_range: (8.0, 68.0),
            image_size: 256,
            noise_sigma: 0.02,
            seed: 42,
            signal: SignalSpec::default(),
        }
    }
}

impl SynthConfig {
    pub fn validated(self) -> Result<Self, SynthError> {
        if self.count < 1 {
            return Err(SynthError::InvalidConfig("count must be ≥ 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(SynthError::InvalidConfig("noise_sigma must be ≥ 0".into()));
        }
        if self.image_size < 32 {
            return Err(SynthError::InvalidConfig("image_size must be ≥ 32".into()));
        }
        let (lo, hi) = self.age_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(SynthError::InvalidConfig(format!("age range [{lo}, {hi}] invalid")));
        }
        for r in [self.signal.pulp_ratio_young, self.signal.pulp_ratio_old] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(SynthError::InvalidConfig(format!(
                    "pulp brightness ratio {r} outside (0, 1]"
                )));
            }
        }
        Ok(self)
    }

    fn pulp_ratio(&self, age: f64) -> f64 {
        let (lo, hi) = self.age_range;
        let t = (age - lo) / (hi - lo);
        self.signal.pulp_ratio_young + t * (self.signal.pulp_ratio_old - self.signal.pulp_ratio_young)
    }
}

/// The exact latent features a record was rendered from, plus the measured
/// signal the oracle regresses on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentFeatures {
    pub pulp_ratio: f64,
    /// Mean brightness over all pulp pixels of the final image.
    pub pulp_mean_brightness: f64,
    pub enamel_brightness: f64,
    pub tooth_count: usize,
    pub texture_dots: usize,
}

#[derive(Debug, Clone)]
pub struct SynthRecord {
    pub image: Image32,
    pub age_years: f64,
    pub features: LatentFeatures,
}

const DENTIN: f64 = 0.85;
const TEETH_PER_ARCH: usize = 14;

fn render_record(cfg: &SynthConfig, age: f64, rng: &mut impl Rng) -> SynthRecord {
    let s = cfg.image_size;
    let sf = s as f64;
    let ratio = cfg.pulp_ratio(age);
    let pulp_brightness = (DENTIN * ratio) as f32;

    // Draw order is part of the determinism contract: missing-teeth sets,
    // then per-tooth jitters, then texture dots, then pixel noise.
    let missing_per_arch = if age > cfg.signal.tooth_loss_threshold {
        (((age - cfg.signal.tooth_loss_threshold) / 3.0).floor() as usize).min(4)
    } else {
        0
    };
    let mut missing: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for m in &mut missing {
        let mut idx: Vec<usize> = (0..TEETH_PER_ARCH).collect();
        idx.shuffle(rng);
        *m = idx.into_iter().take(missing_per_arch).collect();
    }

    struct Tooth {
        cx: f64,
        cy: f64,
        a: f64, // horizontal semi-axis
        b: f64, // vertical semi-axis
    }
    let mut teeth = Vec::new();
    let span = 0.76 * sf;
    let slot = span / TEETH_PER_ARCH as f64;
    let arch_y = |upper: bool, x: f64| -> f64 {
        let u = (x - sf / 2.0) / (0.4 * sf);
        if upper { 0.40 * sf - 0.06 * sf * u * u } else { 0.60 * sf + 0.06 * sf * u * u }
    };
    for (arch, upper) in [(0usize, true), (1, false)] {
        for t in 0..TEETH_PER_ARCH {
            // Every tooth consumes the same rng draws whether or not it is
            // rendered, so the set of missing teeth never shifts its
            // neighbors' shapes.
            let jx = rng.random_range(-0.01..0.01) * sf;
            let jy = rng.random_range(-0.01..0.01) * sf;
            let ja = rng.random_range(0.85..1.15);
            let jb = rng.random_range(0.90..1.10);
            if missing[arch].contains(&t) {
                continue;
            }
            let cx = 0.12 * sf + (t as f64 + 0.5) * slot + jx;
            let b = 0.055 * sf * jb;
            let base_y = arch_y(upper, cx);
            let cy = if upper { base_y + b } else { base_y - b } + jy;
            teeth.push(Tooth { cx, cy, a: 0.35 * slot * ja, b });
        }
    }

    // Background: vertical gradient plus soft bone bands along both arches.
    let mut img = Image32::new(s, s, 1);
    let band = 0.05 * sf;
    for y in 0..s {
        for x in 0..s {
            let mut v = 0.10 + 0.05 * y as f64 / sf;
            for upper in [true, false] {
                let d = (y as f64 - arch_y(upper, x as f64)).abs();
                if d < band {
                    v += 0.15 * (1.0 - d / band);
                }
            }
            img.set(y, x, 0, v as f32);
        }
    }

    // Teeth: enamel rim, dentin body, pulp core. Track masks for the oracle
    // measurement and to keep texture dots off the teeth.
    let mut tooth_mask = vec![false; s * s];
    let mut pulp_mask = vec![false; s * s];
    for t in &teeth {
        let y0 = ((t.cy - t.b).floor().max(0.0)) as usize;
        let y1 = ((t.cy + t.b).ceil().min(sf - 1.0)) as usize;
        let x0 = ((t.cx - t.a).floor().max(0.0)) as usize;
        let x1 = ((t.cx + t.a).ceil().min(sf - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = (x as f64 - t.cx) / t.a;
                let dy = (y as f64 - t.cy) / t.b;
                let r2 = dx * dx + dy * dy;
                if r2 > 1.0 {
                    continue;
                }
                tooth_mask[y * s + x] = true;
                let px = (x as f64 - t.cx) / (0.45 * t.a);
                let py = (y as f64 - t.cy) / (0.55 * t.b);
                let (val, is_pulp) = if px * px + py * py <= 1.0 {
                    (pulp_brightness, true)
                } else if r2 > 0.64 {
                    (0.92, false) // enamel rim
                } else {
                    (DENTIN as f32, false)
                };
                img.set(y, x, 0, val);
                if is_pulp {
                    pulp_mask[y * s + x] = true;
                }
            }
        }
    }

    // Age-linked stipple texture, background only.
    let scale = (s as f64 / 256.0) * (s as f64 / 256.0);
    let dots = ((20.0 + 3.0 * age * cfg.signal.texture_density_scale) * scale).round() as usize;
    for _ in 0..dots {
        let dy = rng.random_range(0..s);
        let dx = rng.random_range(0..s);
        for yy in dy.saturating_sub(1)..(dy + 2).min(s) {
            for xx in dx.saturating_sub(1)..(dx + 2).min(s) {
                if !tooth_mask[yy * s + xx] {
                    let v = img.get(yy, xx, 0) - 0.08;
                    img.set(yy, xx, 0, v);
                }
            }
        }
    }

    // Pixel noise, then clamp into [0,1].
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        for v in &mut img.data {
            *v += normal.sample(rng) as f32;
        }
    }
    for v in &mut img.data {
        *v = v.clamp(0.0, 1.0);
    }

    let pulp_px: Vec<f64> = pulp_mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| img.data[i] as f64)
        .collect();
    let pulp_mean = pulp_px.iter().sum::<f64>() / pulp_px.len().max(1) as f64;

    SynthRecord {
        image: img,
        age_years: age,
        features: LatentFeatures {
            pulp_ratio: ratio,
            pulp_mean_brightness: pulp_mean,
            enamel_brightness: DENTIN,
            tooth_count: teeth.len(),
            texture_dots: dots,
        },
    }
}

/// Generate all records in memory. Deterministic in `config.seed`; each
/// record derives its own generator from `(seed, index)`, so the output is
/// independent of evaluation order.
pub fn generate_records(config: &SynthConfig) -> Result<Vec<SynthRecord>, SynthError> {
    let cfg = config.validated()?;
    let (lo, hi) = cfg.age_range;
    Ok((0..cfg.count)
        .map(|i| {
            let mut rng = rng_for(cfg.seed, &format!("synth.record.{i}"));
            let age = rng.random_range(lo..=hi);
            render_record(&cfg, age, &mut rng)
        })
        .collect())
}

/// File layout produced by [`generate`].
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest_path: PathBuf,
    pub image_dir: PathBuf,
    pub records: Vec<SynthRecord>,
}

/// Generate records and write `images/synth_NNNN.png` plus `manifest.csv`
/// (compatible with the dataset loader) under `out_dir`.
pub fn generate(config: &SynthConfig, out_dir: &Path) -> Result<SynthDataset, SynthError> {
    let records = generate_records(config)?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir)?;
    let manifest_path = out_dir.join("manifest.csv");
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(&manifest_path)?);
    writeln!(manifest, "image_path,age_years,subject_id")?;
    for (i, rec) in records.iter().enumerate() {
        let name = format!("synth_{i:04}.png");
        let img = &rec.image;
        let buf: Vec<u8> = img
            .data
            .iter()
            .map(|&v| (v * 255.0 + 0.5).clamp(0.0, 255.0) as u8)
            .collect();
        let gray = image::GrayImage::from_raw(img.width as u32, img.height as u32, buf)
            .expect("buffer size matches dimensions");
        gray.save(image_dir.join(&name)).map_err(|e| SynthError::Encode(e.to_string()))?;
        writeln!(manifest, "images/{name},{:.6},synth{i:04}", rec.age_years)?;
    }
    manifest.flush()?;
    Ok(SynthDataset { manifest_path, image_dir, records })
}

/// R² of an ordinary-least-squares affine fit from measured mean pulp
/// brightness to age, evaluated on the same records. This is the
/// learnability gate: if a one-feature linear model recovers age, an
/// end-to-end trained network has a fair shot.
pub fn oracle_fit(records: &[SynthRecord]) -> Result<f64, SynthError> {
    const NEED: usize = 50;
    if records.len() < NEED {
        return Err(SynthError::InsufficientData { got: records.len(), need: NEED });
    }
    let n = records.len() as f64;
    let xs: Vec<f64> = records.iter().map(|r| r.features.pulp_mean_brightness).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.age_years).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let pred = slope * x + intercept;
            (y - pred) * (y - pred)
        })
        .sum();
    Ok(1.0 - ss_res / syy)
}
