//! Convolution and pooling built from matmul-backed tensor ops.
//!
//! The stock conv kernels on this backend have a usable forward pass but a
//! very slow backward pass on CPU, so a k×k convolution is decomposed here
//! into k² shifted slices each contracted with a 1×1 weight matrix via
//! batched matmul. Both directions then run on the gemm path and autodiff
//! handles the backward for free. Stride 2 is implemented by splitting the
//! padded input into even/odd phase grids. The stock `conv2d` remains the
//! correctness oracle in tests.

use candle_core::{bail, Result, Tensor};

/// Spatial padding policy for convolutions and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding.
    Valid,
    /// TensorFlow-style "same": output size ceil(input/stride), padding split
    /// with the extra pixel on the bottom/right.
    Same,
    /// Explicit (top, bottom, left, right) zero padding.
    Explicit(usize, usize, usize, usize),
}

impl Padding {
    fn resolve(&self, h: usize, w: usize, kh: usize, kw: usize, stride: usize) -> (usize, usize, usize, usize) {
        match *self {
            Padding::Valid => (0, 0, 0, 0),
            Padding::Explicit(t, b, l, r) => (t, b, l, r),
            Padding::Same => {
                let pad = |n: usize, k: usize| -> (usize, usize) {
                    let out = n.div_ceil(stride);
                    let needed = ((out - 1) * stride + k).saturating_sub(n);
                    (needed / 2, needed - needed / 2)
                };
                let (pt, pb) = pad(h, kh);
                let (pl, pr) = pad(w, kw);
                (pt, pb, pl, pr)
            }
        }
    }
}

fn pad2d(x: &Tensor, pt: usize, pb: usize, pl: usize, pr: usize) -> Result<Tensor> {
    let mut x = x.clone();
    if pt > 0 || pb > 0 {
        x = x.pad_with_zeros(2, pt, pb)?;
    }
    if pl > 0 || pr > 0 {
        x = x.pad_with_zeros(3, pl, pr)?;
    }
    Ok(x)
}

/// Every second element along `dim`, starting at `start`.
fn stride2_select(x: &Tensor, dim: usize, start: usize) -> Result<Tensor> {
    let len = x.dim(dim)?;
    debug_assert!(start < len);
    let span = len - start;
    let n = span.div_ceil(2);
    let mut t = x.narrow(dim, start, span)?;
    if span % 2 == 1 {
        t = t.pad_with_zeros(dim, 0, 1)?;
    }
    let t = t.contiguous()?;
    let mut shape = t.dims().to_vec();
    shape[dim] = n;
    shape.insert(dim + 1, 2);
    t.reshape(shape)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)
}

/// The (dy, dx) tap slice of a padded input, for the given stride and output size.
/// `phases` caches the four stride-2 phase grids of the padded input.
struct TapSlicer {
    stride: usize,
    ho: usize,
    wo: usize,
    phases: Vec<Vec<Tensor>>,
}

impl TapSlicer {
    fn new(xp: &Tensor, stride: usize, ho: usize, wo: usize) -> Result<Self> {
        let phases = match stride {
            1 => vec![vec![xp.clone()]],
            2 => {
                let mut rows = Vec::with_capacity(2);
                for py in 0..2 {
                    let xr = stride2_select(xp, 2, py)?;
                    let mut cols = Vec::with_capacity(2);
                    for px in 0..2 {
                        cols.push(stride2_select(&xr, 3, px)?);
                    }
                    rows.push(cols);
                }
                rows
            }
            s => bail!("unsupported convolution stride {s}"),
        };
        Ok(Self { stride, ho, wo, phases })
    }

    fn tap(&self, dy: usize, dx: usize) -> Result<Tensor> {
        let (grid, oy, ox) = if self.stride == 1 {
            (&self.phases[0][0], dy, dx)
        } else {
            (&self.phases[dy % 2][dx % 2], dy / 2, dx / 2)
        };
        grid.narrow(2, oy, self.ho)?.narrow(3, ox, self.wo)
    }
}

fn out_dim(n: usize, k: usize, stride: usize) -> usize {
    (n - k) / stride + 1
}

/// 2-D convolution; `x` is (B, Cin, H, W), `w` is (Cout, Cin, kh, kw).
pub fn conv2d(x: &Tensor, w: &Tensor, padding: Padding, stride: usize) -> Result<Tensor> {
    let (b, cin, h, width) = x.dims4()?;
    let (cout, cin_w, kh, kw) = w.dims4()?;
    if cin != cin_w {
        bail!("conv2d: input has {cin} channels, weight expects {cin_w}")
    }
    let (pt, pb, pl, pr) = padding.resolve(h, width, kh, kw, stride);
    let xp = pad2d(x, pt, pb, pl, pr)?;
    let (hp, wp) = (h + pt + pb, width + pl + pr);
    if hp < kh || wp < kw {
        bail!("conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    }
    let (ho, wo) = (out_dim(hp, kh, stride), out_dim(wp, kw, stride));

    if kh == 1 && kw == 1 {
        let xs = if stride == 1 {
            xp
        } else {
            stride2_select(&stride2_select(&xp, 2, 0)?, 3, 0)?
        };
        let cols = xs.contiguous()?.reshape((b, cin, ho * wo))?;
        let w2 = w.reshape((cout, cin))?;
        return w2.broadcast_matmul(&cols)?.reshape((b, cout, ho, wo));
    }

    let slicer = TapSlicer::new(&xp, stride, ho, wo)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..kh {
        for dx in 0..kw {
            let cols = slicer.tap(dy, dx)?.contiguous()?.reshape((b, cin, ho * wo))?;
            let w2 = w.narrow(2, dy, 1)?.narrow(3, dx, 1)?.reshape((cout, cin))?.contiguous()?;
            let y = w2.broadcast_matmul(&cols)?;
            acc = Some(match acc {
                None => y,
                Some(a) => (a + y)?,
            });
        }
    }
    acc.unwrap().reshape((b, cout, ho, wo))
}

/// Depthwise 2-D convolution; `w` is (C, 1, kh, kw), one filter per channel.
pub fn depthwise_conv2d(x: &Tensor, w: &Tensor, padding: Padding, stride: usize) -> Result<Tensor> {
    let (_b, cin, h, width) = x.dims4()?;
    let (cw, one, kh, kw) = w.dims4()?;
    if cw != cin || one != 1 {
        bail!("depthwise_conv2d: weight {cw}x{one} incompatible with {cin} input channels")
    }
    let (pt, pb, pl, pr) = padding.resolve(h, width, kh, kw, stride);
    let xp = pad2d(x, pt, pb, pl, pr)?;
    let (hp, wp) = (h + pt + pb, width + pl + pr);
    let (ho, wo) = (out_dim(hp, kh, stride), out_dim(wp, kw, stride));

    let slicer = TapSlicer::new(&xp, stride, ho, wo)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..kh {
        for dx in 0..kw {
            let slice = slicer.tap(dy, dx)?;
            let wt = w.narrow(2, dy, 1)?.narrow(3, dx, 1)?.reshape((1, cin, 1, 1))?;
            let y = slice.broadcast_mul(&wt)?;
            acc = Some(match acc {
                None => y,
                Some(a) => (a + y)?,
            });
        }
    }
    Ok(acc.unwrap())
}

/// Max pooling. Composed from shifted slices and elementwise maximum so the
/// backward pass works for any kernel/stride combination.
pub fn max_pool2d(x: &Tensor, k: usize, stride: usize, padding: Padding) -> Result<Tensor> {
    let (_b, _c, h, width) = x.dims4()?;
    let (pt, pb, pl, pr) = padding.resolve(h, width, k, k, stride);
    if pt != 0 || pb != 0 || pl != 0 || pr != 0 {
        bail!("max_pool2d: zero-padding would corrupt the maximum; pad explicitly upstream")
    }
    let (ho, wo) = (out_dim(h, k, stride), out_dim(width, k, stride));
    let slicer = TapSlicer::new(x, stride, ho, wo)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..k {
        for dx in 0..k {
            let slice = slicer.tap(dy, dx)?.contiguous()?;
            acc = Some(match acc {
                None => slice,
                Some(a) => a.maximum(&slice)?,
            });
        }
    }
    Ok(acc.unwrap())
}

/// 3×3 stride-1 "same" average pooling that excludes the zero padding from the
/// divisor (the reference framework's behavior): positions near the border
/// average over their valid neighbors only.
pub fn avg_pool2d_same_exclude_pad(x: &Tensor, k: usize) -> Result<Tensor> {
    let (_b, _c, h, width) = x.dims4()?;
    let (pt, pb, pl, pr) = Padding::Same.resolve(h, width, k, k, 1);
    let xp = pad2d(x, pt, pb, pl, pr)?;
    let slicer = TapSlicer::new(&xp, 1, h, width)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..k {
        for dx in 0..k {
            let slice = slicer.tap(dy, dx)?;
            acc = Some(match acc {
                None => slice.contiguous()?,
                Some(a) => (a + slice)?,
            });
        }
    }
    let sum = acc.unwrap();
    // Per-position reciprocal of the number of in-bounds taps.
    let mut inv = vec![0f32; h * width];
    for y in 0..h {
        for xcol in 0..width {
            let valid_y = (0..k).filter(|dy| (y + dy) >= pt && (y + dy) < h + pt).count();
            let valid_x = (0..k).filter(|dx| (xcol + dx) >= pl && (xcol + dx) < width + pl).count();
            inv[y * width + xcol] = 1.0 / (valid_y * valid_x) as f32;
        }
    }
    let inv = Tensor::from_vec(inv, (1, 1, h, width), x.device())?;
    sum.broadcast_mul(&inv)
}

/// Global average pooling: (B, C, H, W) → (B, C).
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    x.mean(3)?.mean(2)
}

/// Adaptive average pooling to a fixed output grid (overlapping windows,
/// matching the usual floor/ceil window arithmetic).
pub fn adaptive_avg_pool2d(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let mut cells = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let y0 = i * h / out_h;
        let y1 = ((i + 1) * h).div_ceil(out_h);
        for j in 0..out_w {
            let x0 = j * w / out_w;
            let x1 = ((j + 1) * w).div_ceil(out_w);
            let win = x.narrow(2, y0, y1 - y0)?.narrow(3, x0, x1 - x0)?;
            cells.push(win.mean(3)?.mean(2)?);
        }
    }
    let refs: Vec<&Tensor> = cells.iter().collect();
    Tensor::stack(&refs, 2)?.reshape((b, c, out_h, out_w))
}
