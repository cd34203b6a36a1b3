//! Inception-style backbone (v3): stem plus eleven "mixed" blocks, buildable
//! truncated after any block.
//!
//! Block layout, kernel shapes, strides, and padding follow the canonical
//! published architecture so that parameter counts line up with the
//! reference implementation layer for layer. Every conv is bias-free and
//! followed by batch norm (no learnable scale) and ReLU.

use candle_core::{Result, Tensor};

use crate::nn::{
    avg_pool2d_same_exclude_pad, max_pool2d, BatchNorm2d, BatchNormConfig, Conv2d, Padding,
    ParamStore,
};

use super::Net;

const BN: BatchNormConfig = BatchNormConfig { momentum: 0.99, eps: 1e-3, scale: false };

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, kernel, stride, padding, false)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout, BN)?,
        })
    }

    fn same(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: (usize, usize)) -> Result<Self> {
        Self::new(store, name, cin, cout, kernel, 1, Padding::Same)
    }

    fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, training)?.relu()
    }
}

/// 35×35-style block: 1×1, 5×5, double-3×3, and pooled branches.
struct BlockA {
    b1: ConvBn,
    b5_1: ConvBn,
    b5_2: ConvBn,
    d1: ConvBn,
    d2: ConvBn,
    d3: ConvBn,
    pool: ConvBn,
}

impl BlockA {
    fn new(store: &mut ParamStore, name: &str, cin: usize, pool_features: usize) -> Result<(Self, usize)> {
        let b = Self {
            b1: ConvBn::same(store, &format!("{name}.branch1x1"), cin, 64, (1, 1))?,
            b5_1: ConvBn::same(store, &format!("{name}.branch5x5_1"), cin, 48, (1, 1))?,
            b5_2: ConvBn::same(store, &format!("{name}.branch5x5_2"), 48, 64, (5, 5))?,
            d1: ConvBn::same(store, &format!("{name}.branch3x3dbl_1"), cin, 64, (1, 1))?,
            d2: ConvBn::same(store, &format!("{name}.branch3x3dbl_2"), 64, 96, (3, 3))?,
            d3: ConvBn::same(store, &format!("{name}.branch3x3dbl_3"), 96, 96, (3, 3))?,
            pool: ConvBn::same(store, &format!("{name}.branch_pool"), cin, pool_features, (1, 1))?,
        };
        Ok((b, 64 + 64 + 96 + pool_features))
    }

    fn forward(&self, x: &Tensor, t: bool) -> Result<Tensor> {
        let b1 = self.b1.forward(x, t)?;
        let b5 = self.b5_2.forward(&self.b5_1.forward(x, t)?, t)?;
        let dbl = self.d3.forward(&self.d2.forward(&self.d1.forward(x, t)?, t)?, t)?;
        let pool = self.pool.forward(&avg_pool2d_same_exclude_pad(x, 3)?, t)?;
        Tensor::cat(&[b1, b5, dbl, pool], 1)
    }
}

/// First reduction block (index 3): stride-2 3×3, double-3×3, and max-pool.
struct BlockReduceA {
    b3: ConvBn,
    d1: ConvBn,
    d2: ConvBn,
    d3: ConvBn,
}

impl BlockReduceA {
    fn new(store: &mut ParamStore, name: &str, cin: usize) -> Result<(Self, usize)> {
        let b = Self {
            b3: ConvBn::new(store, &format!("{name}.branch3x3"), cin, 384, (3, 3), 2, Padding::Valid)?,
            d1: ConvBn::same(store, &format!("{name}.branch3x3dbl_1"), cin, 64, (1, 1))?,
            d2: ConvBn::same(store, &format!("{name}.branch3x3dbl_2"), 64, 96, (3, 3))?,
            d3: ConvBn::new(store, &format!("{name}.branch3x3dbl_3"), 96, 96, (3, 3), 2, Padding::Valid)?,
        };
        Ok((b, 384 + 96 + cin))
    }

    fn forward(&self, x: &Tensor, t: bool) -> Result<Tensor> {
        let b3 = self.b3.forward(x, t)?;
        let dbl = self.d3.forward(&self.d2.forward(&self.d1.forward(x, t)?, t)?, t)?;
        let pool = max_pool2d(x, 3, 2, Padding::Valid)?;
        Tensor::cat(&[b3, dbl, pool], 1)
    }
}

/// 17×17-style block with factorized 7×7 convolutions.
struct BlockB {
    b1: ConvBn,
    q1: ConvBn,
    q2: ConvBn,
    q3: ConvBn,
    d1: ConvBn,
    d2: ConvBn,
    d3: ConvBn,
    d4: ConvBn,
    d5: ConvBn,
    pool: ConvBn,
}

impl BlockB {
    fn new(store: &mut ParamStore, name: &str, cin: usize, c7: usize) -> Result<(Self, usize)> {
        let b = Self {
            b1: ConvBn::same(store, &format!("{name}.branch1x1"), cin, 192, (1, 1))?,
            q1: ConvBn::same(store, &format!("{name}.branch7x7_1"), cin, c7, (1, 1))?,
            q2: ConvBn::same(store, &format!("{name}.branch7x7_2"), c7, c7, (1, 7))?,
            q3: ConvBn::same(store, &format!("{name}.branch7x7_3"), c7, 192, (7, 1))?,
            d1: ConvBn::same(store, &format!("{name}.branch7x7dbl_1"), cin, c7, (1, 1))?,
            d2: ConvBn::same(store, &format!("{name}.branch7x7dbl_2"), c7, c7, (7, 1))?,
            d3: ConvBn::same(store, &format!("{name}.branch7x7dbl_3"), c7, c7, (1, 7))?,
            d4: ConvBn::same(store, &format!("{name}.branch7x7dbl_4"), c7, c7, (7, 1))?,
            d5: ConvBn::same(store, &format!("{name}.branch7x7dbl_5"), c7, 192, (1, 7))?,
            pool: ConvBn::same(store, &format!("{name}.branch_pool"), cin, 192, (1, 1))?,
        };
        Ok((b, 192 * 4))
    }

    fn forward(&self, x: &Tensor, t: bool) -> Result<Tensor> {
        let b1 = self.b1.forward(x, t)?;
        let q = self.q3.forward(&self.q2.forward(&self.q1.forward(x, t)?, t)?, t)?;
        let mut d = self.d1.forward(x, t)?;
        for layer in [&self.d2, &self.d3, &self.d4, &self.d5] {
            d = layer.forward(&d, t)?;
        }
        let pool = self.pool.forward(&avg_pool2d_same_exclude_pad(x, 3)?, t)?;
        Tensor::cat(&[b1, q, d, pool], 1)
    }
}

/// Second reduction block (index 8).
struct BlockReduceB {
    b1: ConvBn,
    b2: ConvBn,
    c1: ConvBn,
    c2: ConvBn,
    c3: ConvBn,
    c4: ConvBn,
}

impl BlockReduceB {
    fn new(store: &mut ParamStore, name: &str, cin: usize) -> Result<(Self, usize)> {
        let b = Self {
            b1: ConvBn::same(store, &format!("{name}.branch3x3_1"), cin, 192, (1, 1))?,
            b2: ConvBn::new(store, &format!("{name}.branch3x3_2"), 192, 320, (3, 3), 2, Padding::Valid)?,
            c1: ConvBn::same(store, &format!("{name}.branch7x7x3_1"), cin, 192, (1, 1))?,
            c2: ConvBn::same(store, &format!("{name}.branch7x7x3_2"), 192, 192, (1, 7))?,
            c3: ConvBn::same(store, &format!("{name}.branch7x7x3_3"), 192, 192, (7, 1))?,
            c4: ConvBn::new(store, &format!("{name}.branch7x7x3_4"), 192, 192, (3, 3), 2, Padding::Valid)?,
        };
        Ok((b, 320 + 192 + cin))
    }

    fn forward(&self, x: &Tensor, t: bool) -> Result<Tensor> {
        let b3 = self.b2.forward(&self.b1.forward(x, t)?, t)?;
        let mut c = self.c1.forward(x, t)?;
        for layer in [&self.c2, &self.c3, &self.c4] {
            c = layer.forward(&c, t)?;
        }
        let pool = max_pool2d(x, 3, 2, Padding::Valid)?;
        Tensor::cat(&[b3, c, pool], 1)
    }
}

/// 8×8-style block (indices 9 and 10) with split 1×3/3×1 branches.
struct BlockC {
    b1: ConvBn,
    a0: ConvBn,
    a1: ConvBn,
    a2: ConvBn,
    d0: ConvBn,
    d1: ConvBn,
    d2a: ConvBn,
    d2b: ConvBn,
    pool: ConvBn,
}

impl BlockC {
    fn new(store: &mut ParamStore, name: &str, cin: usize) -> Result<(Self, usize)> {
        let b = Self {
            b1: ConvBn::same(store, &format!("{name}.branch1x1"), cin, 320, (1, 1))?,
            a0: ConvBn::same(store, &format!("{name}.branch3x3_1"), cin, 384, (1, 1))?,
            a1: ConvBn::same(store, &format!("{name}.branch3x3_2a"), 384, 384, (1, 3))?,
            a2: ConvBn::same(store, &format!("{name}.branch3x3_2b"), 384, 384, (3, 1))?,
            d0: ConvBn::same(store, &format!("{name}.branch3x3dbl_1"), cin, 448, (1, 1))?,
            d1: ConvBn::same(store, &format!("{name}.branch3x3dbl_2"), 448, 384, (3, 3))?,
            d2a: ConvBn::same(store, &format!("{name}.branch3x3dbl_3a"), 384, 384, (1, 3))?,
            d2b: ConvBn::same(store, &format!("{name}.branch3x3dbl_3b"), 384, 384, (3, 1))?,
            pool: ConvBn::same(store, &format!("{name}.branch_pool"), cin, 192, (1, 1))?,
        };
        Ok((b, 320 + 768 + 768 + 192))
    }

    fn forward(&self, x: &Tensor, t: bool) -> Result<Tensor> {
        let b1 = self.b1.forward(x, t)?;
        let a = self.a0.forward(x, t)?;
        let a = Tensor::cat(&[self.a1.forward(&a, t)?, self.a2.forward(&a, t)?], 1)?;
        let d = self.d1.forward(&self.d0.forward(x, t)?, t)?;
        let d = Tensor::cat(&[self.d2a.forward(&d, t)?, self.d2b.forward(&d, t)?], 1)?;
        let pool = self.pool.forward(&avg_pool2d_same_exclude_pad(x, 3)?, t)?;
        Tensor::cat(&[b1, a, d, pool], 1)
    }
}

enum Block {
    A(BlockA),
    ReduceA(BlockReduceA),
    B(BlockB),
    ReduceB(BlockReduceB),
    C(BlockC),
}

impl Block {
    fn forward(&self, x: &Tensor, t: bool) -> Result<Tensor> {
        match self {
            Block::A(b) => b.forward(x, t),
            Block::ReduceA(b) => b.forward(x, t),
            Block::B(b) => b.forward(x, t),
            Block::ReduceB(b) => b.forward(x, t),
            Block::C(b) => b.forward(x, t),
        }
    }
}

pub(crate) struct InceptionV3 {
    stem: [ConvBn; 5],
    blocks: Vec<Block>,
}

impl Net for InceptionV3 {
    fn forward(&self, x: &Tensor, t: bool) -> Result<Tensor> {
        let mut x = self.stem[0].forward(x, t)?;
        x = self.stem[1].forward(&x, t)?;
        x = self.stem[2].forward(&x, t)?;
        x = max_pool2d(&x, 3, 2, Padding::Valid)?;
        x = self.stem[3].forward(&x, t)?;
        x = self.stem[4].forward(&x, t)?;
        x = max_pool2d(&x, 3, 2, Padding::Valid)?;
        for b in &self.blocks {
            x = b.forward(&x, t)?;
        }
        Ok(x)
    }
}

fn valid(n: usize, k: usize, s: usize) -> usize {
    (n - k) / s + 1
}

/// Build the network keeping mixed blocks `0..=keep` (10 = the full
/// network). Returns the net and its (height, width, channels) output shape
/// for the given input size.
pub(crate) fn build(
    store: &mut ParamStore,
    keep: usize,
    (h, w): (usize, usize),
) -> Result<(InceptionV3, (usize, usize, usize))> {
    assert!(keep <= 10);
    let stem = [
        ConvBn::new(store, "inception.stem.conv0", 3, 32, (3, 3), 2, Padding::Valid)?,
        ConvBn::new(store, "inception.stem.conv1", 32, 32, (3, 3), 1, Padding::Valid)?,
        ConvBn::same(store, "inception.stem.conv2", 32, 64, (3, 3))?,
        ConvBn::new(store, "inception.stem.conv3", 64, 80, (1, 1), 1, Padding::Valid)?,
        ConvBn::new(store, "inception.stem.conv4", 80, 192, (3, 3), 1, Padding::Valid)?,
    ];
    let track = |n: usize| -> usize {
        let n = valid(n, 3, 2); // conv0
        let n = n - 2; // conv1
        let n = valid(n, 3, 2); // maxpool
        let n = n - 2; // conv4
        valid(n, 3, 2) // maxpool
    };
    let (mut sh, mut sw) = (track(h), track(w));

    let mut blocks = Vec::new();
    let mut c = 192usize;
    for i in 0..=keep {
        let name = format!("inception.mixed{i}");
        let (block, cout) = match i {
            0 => {
                let (b, co) = BlockA::new(store, &name, c, 32)?;
                (Block::A(b), co)
            }
            1 | 2 => {
                let (b, co) = BlockA::new(store, &name, c, 64)?;
                (Block::A(b), co)
            }
            3 => {
                let (b, co) = BlockReduceA::new(store, &name, c)?;
                sh = valid(sh, 3, 2);
                sw = valid(sw, 3, 2);
                (Block::ReduceA(b), co)
            }
            4 => {
                let (b, co) = BlockB::new(store, &name, c, 128)?;
                (Block::B(b), co)
            }
            5 | 6 => {
                let (b, co) = BlockB::new(store, &name, c, 160)?;
                (Block::B(b), co)
            }
            7 => {
                let (b, co) = BlockB::new(store, &name, c, 192)?;
                (Block::B(b), co)
            }
            8 => {
                let (b, co) = BlockReduceB::new(store, &name, c)?;
                sh = valid(sh, 3, 2);
                sw = valid(sw, 3, 2);
                (Block::ReduceB(b), co)
            }
            _ => {
                let (b, co) = BlockC::new(store, &name, c)?;
                (Block::C(b), co)
            }
        };
        blocks.push(block);
        c = cout;
    }
    Ok((InceptionV3 { stem, blocks }, (sh, sw, c)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{build_backbone, truncate_inception, BackboneName, BackboneSpec};
    use candle_core::Device;

    /// Cumulative trainable parameter counts through each mixed block,
    /// frozen from the reference implementation (backbone only, no head).
    const EXPECTED_CUT_COUNTS: [(usize, usize); 7] = [
        (3, 2_141_984),
        (4, 3_437_856),
        (5, 5_127_136),
        (6, 6_816_416),
        (7, 8_956_448),
        (8, 10_653_472),
        (9, 15_694_816),
    ];
    const EXPECTED_FULL: usize = 21_768_352;
    const EXPECTED_FULL_BUFFERS: usize = 34_432;

    #[test]
    fn cut_parameter_counts_match_reference() {
        for (k, want) in EXPECTED_CUT_COUNTS {
            let ex = truncate_inception(k as u8, false, 1).unwrap();
            assert_eq!(
                ex.trainable_parameter_count(),
                want,
                "cut {k}: got {}",
                ex.trainable_parameter_count()
            );
        }
    }

    #[test]
    fn full_network_counts_match_reference() {
        let ex = build_backbone(&BackboneSpec::new(BackboneName::InceptionV3), 1).unwrap();
        assert_eq!(ex.trainable_parameter_count(), EXPECTED_FULL);
        assert_eq!(ex.store().non_trainable_parameter_count(), EXPECTED_FULL_BUFFERS);
        assert_eq!(ex.output_shape(), (6, 6, 2048));
    }

    #[test]
    fn counts_strictly_increase_with_cut_index() {
        let mut prev = 0;
        for k in 3..=9u8 {
            let n = truncate_inception(k, false, 1).unwrap().trainable_parameter_count();
            assert!(n > prev, "cut {k} count {n} not above previous {prev}");
            prev = n;
        }
        assert!(EXPECTED_FULL > prev);
    }

    #[test]
    fn spatial_shape_shrinks_weakly_with_cut_depth() {
        let shapes: Vec<(usize, usize, usize)> = (3..=9u8)
            .map(|k| truncate_inception(k, false, 1).unwrap().output_shape())
            .collect();
        assert_eq!(shapes[0], (14, 14, 768));
        assert_eq!(shapes[4], (14, 14, 768));
        assert_eq!(shapes[5], (6, 6, 1280));
        assert_eq!(shapes[6], (6, 6, 2048));
        for pair in shapes.windows(2) {
            assert!(pair[1].0 <= pair[0].0);
        }
    }

    #[test]
    fn truncation_preserves_retained_weights_bit_identical() {
        let full = build_backbone(&BackboneSpec::new(BackboneName::InceptionV3), 99).unwrap();
        let cut = truncate_inception(4, false, 99).unwrap();
        let full_snap = full.store().snapshot().unwrap();
        let cut_snap = cut.store().snapshot().unwrap();
        assert!(cut_snap.len() < full_snap.len());
        for (name, tensor) in &cut_snap {
            let full_tensor = full_snap
                .get(name)
                .unwrap_or_else(|| panic!("cut layer {name} missing from full network"));
            let a: Vec<f32> = tensor.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = full_tensor.flatten_all().unwrap().to_vec1().unwrap();
            assert!(a == b, "weights differ for retained layer {name}");
        }
    }

    #[test]
    fn forward_shape_matches_predicted_shape() {
        // Minimum input size keeps this cheap while exercising every block.
        let mut spec = BackboneSpec::new(BackboneName::InceptionV3);
        spec.input_shape = (75, 75, 3);
        let ex = build_backbone(&spec, 1).unwrap();
        let (h, w, c) = ex.output_shape();
        let x = Tensor::rand(-1f32, 1f32, (1, 3, 75, 75), &Device::Cpu).unwrap();
        let y = ex.forward(&x, false).unwrap();
        assert_eq!(y.dims(), &[1, c, h, w]);
        assert_eq!((h, w, c), (1, 1, 2048));
    }

    #[test]
    fn truncated_forward_runs_and_matches_shape() {
        let mut spec = BackboneSpec::new(BackboneName::InceptionV3);
        spec.input_shape = (75, 75, 3);
        let ex = crate::backbones::build_extractor(
            &crate::backbones::TruncationSpec::cut(spec, 3),
            1,
        )
        .unwrap();
        let (h, w, c) = ex.output_shape();
        assert_eq!(c, 768);
        let x = Tensor::rand(-1f32, 1f32, (2, 3, 75, 75), &Device::Cpu).unwrap();
        let y = ex.forward(&x, false).unwrap();
        assert_eq!(y.dims(), &[2, c, h, w]);
    }
}
