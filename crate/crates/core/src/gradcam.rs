//! Gradient-weighted activation heatmaps for the scalar age output.
//!
//! The attribution signal is the gradient of the predicted age with respect
//! to the last convolutional feature map: channel weights are the spatial
//! means of that gradient, the raw map is the ReLU of the weighted channel
//! sum, and the emitted heatmap is that map bilinearly upsampled to the
//! input size and min-max normalized to [0, 1] (all zeros when the map is
//! constant). The overlay blends the de-normalized input with a colorized
//! rendering of the heatmap.

use candle_core::{Tensor, Var};
use thiserror::Error;

use crate::dataset::Image32;
use crate::regressor::{RegressionModel, RegressorError};

/// The one supported attribution layer: the extractor's final feature map
/// (the last convolutional output before pooling). Deeper taps are not
/// exposed.
pub const DEFAULT_TARGET_LAYER: &str = "features";

/// Blend weight used for the overlay baked into [`grad_cam`]'s result.
pub const OVERLAY_ALPHA: f32 = 0.5;

#[derive(Debug, Error)]
pub enum GradCamError {
    #[error("unknown target layer {0:?} (supported: {DEFAULT_TARGET_LAYER:?})")]
    UnknownLayer(String),
    #[error("no gradient path from the output to the target layer: {0}")]
    NonDifferentiablePath(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f32),
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error("tensor operation failed: {0}")]
    Tensor(#[from] candle_core::Error),
}

/// A heatmap explanation for one image.
#[derive(Debug, Clone)]
pub struct HeatmapOverlay {
    /// Single-channel map, input dimensions, values in [0, 1].
    pub heatmap: Image32,
    /// Input blended with the colorized heatmap (RGB, values in [0, 1]).
    pub overlay: Image32,
    pub target_layer: String,
    /// Age (years) the model predicted for this image.
    pub predicted_age: f64,
}

/// Core attribution math behind [`grad_cam`], usable directly with any
/// scalar head: run `head` on the (detached) NCHW feature map (batch 1),
/// differentiate the scalar output with respect to the features, and fold
/// channels with the spatial-mean gradient weights. Returns the predicted
/// value and the raw (un-normalized) ReLU map at feature-map resolution,
/// row-major, together with its height and width.
pub fn attribution_map<F>(
    features: &Tensor,
    head: F,
) -> Result<(f64, Vec<f32>, usize, usize), GradCamError>
where
    F: Fn(&Tensor) -> Result<Tensor, GradCamError>,
{
    let (b, _c, h, w) = features
        .dims4()
        .map_err(|_| GradCamError::ShapeMismatch(format!("features must be NCHW, got {:?}", features.dims())))?;
    if b != 1 {
        return Err(GradCamError::ShapeMismatch(format!("one image at a time, got batch {b}")));
    }
    let leaf = Var::from_tensor(&features.detach())?;
    let pred = head(leaf.as_tensor())?;
    let predicted_age = pred.flatten_all()?.to_vec1::<f32>()?[0] as f64;
    let grads = pred.backward()?;
    let grad = grads
        .get(leaf.as_tensor())
        .ok_or_else(|| {
            GradCamError::NonDifferentiablePath("output does not depend on the feature map".into())
        })?;
    // Channel weights: spatial mean of the gradient.
    let alpha = grad.mean_keepdim(3)?.mean_keepdim(2)?; // (1, C, 1, 1)
    let weighted = leaf.as_tensor().broadcast_mul(&alpha)?.sum(1)?; // (1, H, W)
    let raw = weighted.relu()?.flatten_all()?.to_vec1::<f32>()?;
    Ok((predicted_age, raw, h, w))
}

/// Bilinear resize (half-pixel-center convention) of a single-channel map.
fn bilinear_resize(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; dh * dw];
    let sy_scale = sh as f32 / dh as f32;
    let sx_scale = sw as f32 / dw as f32;
    for dy in 0..dh {
        let fy = ((dy as f32 + 0.5) * sy_scale - 0.5).clamp(0.0, (sh - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f32;
        for dx in 0..dw {
            let fx = ((dx as f32 + 0.5) * sx_scale - 0.5).clamp(0.0, (sw - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f32;
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bot = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out[dy * dw + dx] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Min-max normalize to [0, 1]; a constant map comes back all zeros.
fn min_max_normalize(map: &mut [f32]) {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in map.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        for v in map.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        map.fill(0.0);
    }
}

/// Classic piecewise-linear "jet" colormap.
fn jet(t: f32) -> [f32; 3] {
    let ramp = |x: f32| (1.5 - x.abs()).clamp(0.0, 1.0);
    let t = t.clamp(0.0, 1.0) * 4.0;
    [ramp(t - 3.0), ramp(t - 2.0), ramp(t - 1.0)]
}

/// Recover a displayable grayscale image from a preprocessed (1, 3, H, W)
/// tensor by inverting the model's input normalization.
fn display_image(model: &RegressionModel, image: &Tensor) -> Result<Image32, GradCamError> {
    let (_, c, h, w) = image.dims4()?;
    let chw: Vec<f32> = image.flatten_all()?.to_vec1()?;
    let mut img = Image32::new(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                img.set(y, x, ch, chw[(ch * h + y) * w + x]);
            }
        }
    }
    model.extractor().name().normalization().invert(&mut img);
    // Collapse to one gray channel (the pipeline replicates gray to RGB).
    let mut gray = Image32::new(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let m = (0..c).map(|ch| img.get(y, x, ch)).sum::<f32>() / c as f32;
            gray.set(y, x, 0, m.clamp(0.0, 1.0));
        }
    }
    Ok(gray)
}

/// Compute the heatmap explanation of `model`'s prediction on one
/// preprocessed image (shape (1, 3, H, W) matching the model input).
pub fn grad_cam(
    model: &RegressionModel,
    image: &Tensor,
    target_layer: &str,
) -> Result<HeatmapOverlay, GradCamError> {
    if target_layer != DEFAULT_TARGET_LAYER {
        return Err(GradCamError::UnknownLayer(target_layer.to_string()));
    }
    let dims = image.dims().to_vec();
    let (ih, iw, ic) = model.extractor().input_shape();
    if dims != [1, ic, ih, iw] {
        return Err(GradCamError::ShapeMismatch(format!(
            "expected (1, {ic}, {ih}, {iw}), got {dims:?}"
        )));
    }
    let features = model.features(image, false)?;
    let (predicted_age, raw, fh, fw) =
        attribution_map(&features, |f| model.head_forward(f, false).map_err(GradCamError::from))?;
    let mut map = bilinear_resize(&raw, fh, fw, ih, iw);
    min_max_normalize(&mut map);
    let heatmap = Image32::from_vec(ih, iw, 1, map);
    let base = display_image(model, image)?;
    let overlay = render_overlay(&base, &heatmap, OVERLAY_ALPHA)?;
    Ok(HeatmapOverlay {
        heatmap,
        overlay,
        target_layer: target_layer.to_string(),
        predicted_age,
    })
}

/// Load an image from disk, run the model's standard inference
/// preprocessing, and explain the prediction — the one-stop entry point for
/// explaining a file rather than an already-built input batch.
pub fn explain_image(
    model: &RegressionModel,
    image_path: &std::path::Path,
) -> Result<HeatmapOverlay, GradCamError> {
    let (ih, iw, _) = model.extractor().input_shape();
    let spec = crate::dataset::PreprocessSpec {
        target_height: ih,
        target_width: iw,
        ..crate::dataset::PreprocessSpec::new(model.extractor().name().normalization())
    };
    let record = crate::dataset::ImageRecord {
        image_path: image_path.to_path_buf(),
        age_years: 0.0,
        subject_id: None,
        split: crate::dataset::Split::Unassigned,
    };
    let img = crate::dataset::load_and_preprocess(&record, &spec)?;
    let input = Tensor::from_vec(img.to_chw_vec(), (1, 3, ih, iw), &candle_core::Device::Cpu)?;
    grad_cam(model, &input, DEFAULT_TARGET_LAYER)
}

/// Blend a grayscale (or RGB) image with the colorized heatmap:
/// `(1 − alpha) · image + alpha · colormap(heatmap)`.
pub fn render_overlay(
    original: &Image32,
    heatmap: &Image32,
    alpha: f32,
) -> Result<Image32, GradCamError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GradCamError::InvalidAlpha(alpha));
    }
    if heatmap.channels != 1
        || original.height != heatmap.height
        || original.width != heatmap.width
        || (original.channels != 1 && original.channels != 3)
    {
        return Err(GradCamError::ShapeMismatch(format!(
            "original {}x{}x{} vs heatmap {}x{}x{}",
            original.height, original.width, original.channels,
            heatmap.height, heatmap.width, heatmap.channels,
        )));
    }
    let (h, w) = (original.height, original.width);
    let mut out = Image32::new(h, w, 3);
    for y in 0..h {
        for x in 0..w {
            let color = jet(heatmap.get(y, x, 0));
            for ch in 0..3 {
                let base = if original.channels == 1 {
                    original.get(y, x, 0)
                } else {
                    original.get(y, x, ch)
                };
                out.set(y, x, ch, ((1.0 - alpha) * base + alpha * color[ch]).clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{build_backbone, BackboneName, BackboneSpec};
    use crate::regressor::assemble;
    use candle_core::Device;

    fn tiny_model(seed: u64, side: usize) -> RegressionModel {
        let mut spec = BackboneSpec::new(BackboneName::MobileNetV2);
        spec.input_shape = (side, side, 3);
        assemble(build_backbone(&spec, seed).unwrap()).unwrap()
    }

    #[test]
    fn explain_image_loads_preprocesses_and_matches_manual_path() {
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("tooth.png");
        let mut img = image::GrayImage::new(32, 32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            p.0 = [((x * 7 + y * 3) % 251) as u8];
        }
        img.save(&png).unwrap();

        let model = tiny_model(11, 32);
        let out = explain_image(&model, &png).unwrap();
        assert!(out.predicted_age.is_finite());
        assert_eq!((out.heatmap.height, out.heatmap.width), (32, 32));

        // Same file through the manual preprocess + grad_cam path.
        let record = crate::dataset::ImageRecord {
            image_path: png.clone(),
            age_years: 0.0,
            subject_id: None,
            split: crate::dataset::Split::Unassigned,
        };
        let spec = crate::dataset::PreprocessSpec {
            target_height: 32,
            target_width: 32,
            ..crate::dataset::PreprocessSpec::new(
                model.extractor().name().normalization(),
            )
        };
        let pre = crate::dataset::load_and_preprocess(&record, &spec).unwrap();
        let input =
            Tensor::from_vec(pre.to_chw_vec(), (1, 3, 32, 32), &Device::Cpu).unwrap();
        let manual = grad_cam(&model, &input, DEFAULT_TARGET_LAYER).unwrap();
        assert_eq!(out.heatmap.data, manual.heatmap.data);
        assert_eq!(out.predicted_age, manual.predicted_age);

        let missing = explain_image(&model, &dir.path().join("absent.png"));
        assert!(matches!(missing, Err(GradCamError::Dataset(_))));
    }

    fn rand_input(side: usize, seed: u64) -> Tensor {
        // Deterministic pseudo-image so repeated calls agree bit-for-bit.
        let mut v = Vec::with_capacity(3 * side * side);
        let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).max(1);
        for _ in 0..3 * side * side {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            v.push((s as f64 / u64::MAX as f64) as f32 * 2.0 - 1.0);
        }
        Tensor::from_vec(v, (1, 3, side, side), &Device::Cpu).unwrap()
    }

    /// Toy network: features A with two channels on a 2×2 grid, head
    /// `out = c1·GAP(A_1) + c2·GAP(A_2)`. Then ∂out/∂A_k = c_k/4 everywhere,
    /// α = (c1/4, c2/4), and the raw map is relu(α1·A_1 + α2·A_2) — all
    /// hand-computable.
    #[test]
    fn toy_network_matches_hand_computed_map() {
        let a1 = [1.0f32, -2.0, 3.0, 0.5];
        let a2 = [0.25f32, 4.0, -1.0, 2.0];
        let (c1, c2) = (0.8f32, -0.4f32);
        let features = Tensor::from_vec(
            a1.iter().chain(a2.iter()).copied().collect::<Vec<f32>>(),
            (1, 2, 2, 2),
            &Device::Cpu,
        )
        .unwrap();
        let weights = Tensor::from_vec(vec![c1, c2], (2, 1), &Device::Cpu).unwrap();
        let head = move |f: &Tensor| -> Result<Tensor, GradCamError> {
            let pooled = crate::nn::global_avg_pool(f)?; // (1, 2)
            Ok(pooled.matmul(&weights)?)
        };
        let (pred, raw, h, w) = attribution_map(&features, head).unwrap();
        assert_eq!((h, w), (2, 2));

        let gap1 = a1.iter().sum::<f32>() / 4.0;
        let gap2 = a2.iter().sum::<f32>() / 4.0;
        assert!((pred - (c1 * gap1 + c2 * gap2) as f64).abs() < 1e-6);

        let (al1, al2) = (c1 / 4.0, c2 / 4.0);
        for i in 0..4 {
            let expect = (al1 * a1[i] + al2 * a2[i]).max(0.0);
            assert!(
                (raw[i] - expect).abs() <= 1e-6,
                "cell {i}: got {} want {expect}",
                raw[i]
            );
        }
    }

    #[test]
    fn zero_weight_head_gives_all_zero_heatmap() {
        let model = tiny_model(3, 32);
        let mut snap = model.store().snapshot().unwrap();
        let w = snap.get("head.output.weight").unwrap();
        snap.insert("head.output.weight".into(), w.zeros_like().unwrap());
        model.store().restore(&snap).unwrap();
        let out = grad_cam(&model, &rand_input(32, 1), DEFAULT_TARGET_LAYER).unwrap();
        assert!(out.heatmap.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heatmap_has_input_dims_and_unit_range() {
        let model = tiny_model(5, 64);
        let out = grad_cam(&model, &rand_input(64, 2), DEFAULT_TARGET_LAYER).unwrap();
        assert_eq!((out.heatmap.height, out.heatmap.width, out.heatmap.channels), (64, 64, 1));
        assert_eq!((out.overlay.height, out.overlay.width, out.overlay.channels), (64, 64, 3));
        assert!(out.predicted_age.is_finite());
        assert!(out.heatmap.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(out.overlay.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn normalized_heatmap_invariant_under_positive_head_scaling() {
        let x = rand_input(32, 7);
        let a = tiny_model(9, 32);
        let base = grad_cam(&a, &x, DEFAULT_TARGET_LAYER).unwrap();

        let b = tiny_model(9, 32);
        let mut snap = b.store().snapshot().unwrap();
        let w = snap.get("head.output.weight").unwrap();
        snap.insert("head.output.weight".into(), (w.clone() * 3.7f64).unwrap());
        b.store().restore(&snap).unwrap();
        let scaled = grad_cam(&b, &x, DEFAULT_TARGET_LAYER).unwrap();

        for (p, q) in base.heatmap.data.iter().zip(scaled.heatmap.data.iter()) {
            assert!((p - q).abs() <= 1e-5, "{p} vs {q}");
        }
    }

    #[test]
    fn identical_inputs_give_identical_heatmaps() {
        let model = tiny_model(11, 32);
        let x = rand_input(32, 3);
        let a = grad_cam(&model, &x, DEFAULT_TARGET_LAYER).unwrap();
        let b = grad_cam(&model, &x, DEFAULT_TARGET_LAYER).unwrap();
        assert_eq!(a.heatmap.data, b.heatmap.data);
        assert_eq!(a.overlay.data, b.overlay.data);
        assert_eq!(a.predicted_age, b.predicted_age);
    }

    #[test]
    fn unknown_layer_and_bad_shapes_are_rejected() {
        let model = tiny_model(13, 32);
        assert!(matches!(
            grad_cam(&model, &rand_input(32, 1), "mixed7"),
            Err(GradCamError::UnknownLayer(_))
        ));
        let batch2 = Tensor::zeros((2, 3, 32, 32), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            grad_cam(&model, &batch2, DEFAULT_TARGET_LAYER),
            Err(GradCamError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn overlay_alpha_limits_reproduce_endpoints() {
        let mut original = Image32::new(2, 2, 1);
        for (i, v) in [0.1f32, 0.4, 0.7, 1.0].iter().enumerate() {
            original.data[i] = *v;
        }
        let mut heat = Image32::new(2, 2, 1);
        for (i, v) in [0.0f32, 0.25, 0.5, 1.0].iter().enumerate() {
            heat.data[i] = *v;
        }

        let zero = render_overlay(&original, &heat, 0.0).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..3 {
                    assert_eq!(zero.get(y, x, c), original.get(y, x, 0));
                }
            }
        }

        let one = render_overlay(&original, &heat, 1.0).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                let expect = jet(heat.get(y, x, 0));
                for c in 0..3 {
                    assert_eq!(one.get(y, x, c), expect[c]);
                }
            }
        }
    }

    #[test]
    fn zero_heatmap_blends_uniform_cold_color() {
        let mut original = Image32::new(2, 2, 1);
        original.data.copy_from_slice(&[0.2, 0.4, 0.6, 0.8]);
        let heat = Image32::new(2, 2, 1); // all zeros
        let alpha = 0.5;
        let out = render_overlay(&original, &heat, alpha).unwrap();
        let cold = jet(0.0);
        assert_eq!(cold, [0.0, 0.0, 0.5], "jet endpoint");
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..3 {
                    let expect = (1.0 - alpha) * original.get(y, x, 0) + alpha * cold[c];
                    assert!((out.get(y, x, c) - expect).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn overlay_validates_inputs() {
        let original = Image32::new(4, 4, 1);
        let heat = Image32::new(2, 2, 1);
        assert!(matches!(
            render_overlay(&original, &heat, 0.5),
            Err(GradCamError::ShapeMismatch(_))
        ));
        let heat4 = Image32::new(4, 4, 1);
        assert!(matches!(
            render_overlay(&original, &heat4, 1.5),
            Err(GradCamError::InvalidAlpha(_))
        ));
    }

    #[test]
    fn bilinear_resize_identity_and_interpolation() {
        let src = [1.0f32, 2.0, 3.0, 4.0];
        assert_eq!(bilinear_resize(&src, 2, 2, 2, 2), src.to_vec());
        // Upsample 1×2 → 1×4 with half-pixel centers: [1, 2] → [1, 1.25, 1.75, 2].
        let up = bilinear_resize(&[1.0, 2.0], 1, 2, 1, 4);
        for (got, want) in up.iter().zip([1.0f32, 1.25, 1.75, 2.0]) {
            assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
        }
    }
}
