//! Stochastic training-time augmentation: small rotation, zoom, horizontal
//! and vertical shift, and brightness scaling.
//!
//! Randomness lives exclusively in [`sample_params`]; [`apply`] is a pure
//! function of (image, sample), so a recorded sample replays bit-identically.
//! The three geometric transforms are composed into a single affine map and
//! applied with one bilinear warp (order: rotate, then zoom, then shift);
//! brightness multiplies pixel values on the pre-normalization [0,1] scale
//! and clamps back into range.

use rand::Rng;
use thiserror::Error;

use crate::dataset::Image32;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
}

/// How pixels that map outside the source frame are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    /// Replicate the nearest edge pixel.
    Nearest,
    /// Fill with zeros.
    ConstantBlack,
}

/// Ranges the per-image augmentation parameters are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub rotation_degrees: (f64, f64),
    pub zoom_fraction: f64,
    pub shift_fraction_h: f64,
    pub shift_fraction_v: f64,
    pub brightness_range: (f64, f64),
    pub fill_policy: FillPolicy,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotation_degrees: (-5.0, 5.0),
            zoom_fraction: 0.15,
            shift_fraction_h: 0.10,
            shift_fraction_v: 0.10,
            brightness_range: (0.70, 1.10),
            fill_policy: FillPolicy::Nearest,
        }
    }
}

impl AugmentationConfig {
    /// Validate the invariants. `Default` values always pass.
    pub fn validated(self) -> Result<Self, AugmentError> {
        let (rlo, rhi) = self.rotation_degrees;
        if rlo > rhi {
            return Err(AugmentError::InvalidConfig(format!("rotation interval [{rlo}, {rhi}] inverted")));
        }
        let (blo, bhi) = self.brightness_range;
        if blo > bhi || blo < 0.0 {
            return Err(AugmentError::InvalidConfig(format!("brightness range [{blo}, {bhi}] invalid")));
        }
        for (name, f) in [
            ("zoom_fraction", self.zoom_fraction),
            ("shift_fraction_h", self.shift_fraction_h),
            ("shift_fraction_v", self.shift_fraction_v),
        ] {
            if !(0.0..1.0).contains(&f) {
                return Err(AugmentError::InvalidConfig(format!("{name} {f} outside [0, 1)")));
            }
        }
        Ok(self)
    }

    /// A config whose every draw is the identity sample.
    pub fn identity() -> Self {
        Self {
            rotation_degrees: (0.0, 0.0),
            zoom_fraction: 0.0,
            shift_fraction_h: 0.0,
            shift_fraction_v: 0.0,
            brightness_range: (1.0, 1.0),
            fill_policy: FillPolicy::Nearest,
        }
    }
}

/// One concrete draw of augmentation parameters. Shifts are in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationSample {
    pub rotation: f64,
    pub zoom: f64,
    pub shift_h: f64,
    pub shift_v: f64,
    pub brightness: f64,
}

impl AugmentationSample {
    pub const IDENTITY: Self =
        Self { rotation: 0.0, zoom: 1.0, shift_h: 0.0, shift_v: 0.0, brightness: 1.0 };

    fn is_geometric_identity(&self) -> bool {
        self.rotation == 0.0 && self.zoom == 1.0 && self.shift_h == 0.0 && self.shift_v == 0.0
    }
}

/// Draw one parameter set. The draw order (rotation, zoom, shift_h, shift_v,
/// brightness) is part of the determinism contract and must not change.
/// Shift fractions are converted to pixels using the given image dimensions.
pub fn sample_params<R: Rng>(
    config: &AugmentationConfig,
    (height, width): (usize, usize),
    rng: &mut R,
) -> AugmentationSample {
    let rotation = rng.random_range(config.rotation_degrees.0..=config.rotation_degrees.1);
    let zoom = rng.random_range(1.0 - config.zoom_fraction..=1.0 + config.zoom_fraction);
    let max_h = config.shift_fraction_h * width as f64;
    let shift_h = rng.random_range(-max_h..=max_h);
    let max_v = config.shift_fraction_v * height as f64;
    let shift_v = rng.random_range(-max_v..=max_v);
    let brightness = rng.random_range(config.brightness_range.0..=config.brightness_range.1);
    AugmentationSample { rotation, zoom, shift_h, shift_v, brightness }
}

#[inline]
fn sample_bilinear(img: &Image32, y: f64, x: f64, c: usize, fill: FillPolicy) -> f32 {
    let (h, w) = (img.height as f64, img.width as f64);
    let (y, x) = match fill {
        FillPolicy::Nearest => (y.clamp(0.0, h - 1.0), x.clamp(0.0, w - 1.0)),
        FillPolicy::ConstantBlack => (y, x),
    };
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = (y - y0) as f32;
    let fx = (x - x0) as f32;
    let tap = |yy: f64, xx: f64| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= h || xx >= w {
            0.0
        } else {
            img.get(yy as usize, xx as usize, c)
        }
    };
    let v00 = tap(y0, x0);
    let v01 = tap(y0, x0 + 1.0);
    let v10 = tap(y0 + 1.0, x0);
    let v11 = tap(y0 + 1.0, x0 + 1.0);
    v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
}

/// Apply one sample to an image. Geometry first (rotate about the center by
/// `rotation` degrees, scale about the center by `zoom`, translate by the
/// shifts), then brightness. A point at offset (dx, dy) from the center
/// (y axis pointing down) moves forward to
/// (dx·cosθ − dy·sinθ, dx·sinθ + dy·cosθ)·zoom + (shift_h, shift_v);
/// the warp evaluates the inverse of that map per output pixel.
pub fn apply(image: &Image32, sample: &AugmentationSample, fill: FillPolicy) -> Image32 {
    let mut out = if sample.is_geometric_identity() {
        image.clone()
    } else {
        let (h, w, ch) = (image.height, image.width, image.channels);
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let theta = sample.rotation.to_radians();
        let (sin, cos) = (theta.sin(), theta.cos());
        let inv_zoom = 1.0 / sample.zoom;
        let mut out = Image32::new(h, w, ch);
        for oy in 0..h {
            for ox in 0..w {
                // Invert shift and zoom, then rotate by −θ.
                let dx = (ox as f64 - cx - sample.shift_h) * inv_zoom;
                let dy = (oy as f64 - cy - sample.shift_v) * inv_zoom;
                let sx = dx * cos + dy * sin + cx;
                let sy = -dx * sin + dy * cos + cy;
                for c in 0..ch {
                    out.set(oy, ox, c, sample_bilinear(image, sy, sx, c, fill));
                }
            }
        }
        out
    };
    if sample.brightness != 1.0 {
        let b = sample.brightness as f32;
        for v in &mut out.data {
            *v = (*v * b).clamp(0.0, 1.0);
        }
    }
    out
}
