//! Pre-activation residual backbone (50-layer, v2): batch norm and ReLU
//! precede each convolution; four stacks of bottleneck blocks with the
//! stride-2 downsampling at the end of the first three stacks.

use candle_core::{Result, Tensor};

use crate::nn::{max_pool2d, BatchNorm2d, BatchNormConfig, Conv2d, Padding, ParamStore};

use super::Net;

const BN: BatchNormConfig = BatchNormConfig { momentum: 0.99, eps: 1.001e-5, scale: true };

struct Bottleneck {
    preact_bn: BatchNorm2d,
    shortcut: Option<Conv2d>, // conv shortcut on the first block of a stack
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    stride: usize,
}

impl Bottleneck {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        filters: usize,
        stride: usize,
        conv_shortcut: bool,
    ) -> Result<Self> {
        let cout = 4 * filters;
        Ok(Self {
            preact_bn: BatchNorm2d::new(store, &format!("{name}.preact_bn"), cin, BN)?,
            shortcut: if conv_shortcut {
                Some(Conv2d::new(store, &format!("{name}.shortcut"), cin, cout, (1, 1), stride, Padding::Valid, true)?)
            } else {
                None
            },
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, filters, (1, 1), 1, Padding::Valid, false)?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), filters, BN)?,
            conv2: Conv2d::new(
                store,
                &format!("{name}.conv2"),
                filters,
                filters,
                (3, 3),
                stride,
                Padding::Explicit(1, 1, 1, 1),
                false,
            )?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), filters, BN)?,
            conv3: Conv2d::new(store, &format!("{name}.conv3"), filters, cout, (1, 1), 1, Padding::Valid, true)?,
            stride,
        })
    }

    fn forward(&self, x: &Tensor, t: bool) -> Result<Tensor> {
        let preact = self.preact_bn.forward(x, t)?.relu()?;
        let shortcut = match &self.shortcut {
            Some(conv) => conv.forward(&preact)?,
            None if self.stride > 1 => max_pool2d(x, 1, self.stride, Padding::Valid)?,
            None => x.clone(),
        };
        let y = self.bn1.forward(&self.conv1.forward(&preact)?, t)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, t)?.relu()?;
        let y = self.conv3.forward(&y)?;
        shortcut + y
    }
}

pub(crate) struct ResNet50V2 {
    stem_conv: Conv2d,
    blocks: Vec<Bottleneck>,
    post_bn: BatchNorm2d,
}

impl Net for ResNet50V2 {
    fn forward(&self, x: &Tensor, t: bool) -> Result<Tensor> {
        let mut x = self.stem_conv.forward(x)?;
        x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        x = max_pool2d(&x, 3, 2, Padding::Valid)?;
        for b in &self.blocks {
            x = b.forward(&x, t)?;
        }
        self.post_bn.forward(&x, t)?.relu()
    }
}

pub(crate) fn build(
    store: &mut ParamStore,
    (h, w): (usize, usize),
) -> Result<(ResNet50V2, (usize, usize, usize))> {
    // (filters, block count); stride 2 at the end of the first three stacks.
    const STACKS: [(usize, usize); 4] = [(64, 3), (128, 4), (256, 6), (512, 3)];

    let stem_conv =
        Conv2d::new(store, "resnet50v2.stem.conv", 3, 64, (7, 7), 2, Padding::Explicit(3, 3, 3, 3), true)?;
    let down = |n: usize| (n - 1) / 2 + 1; // pad 1, k3 (or the 7/pad-3 stem), stride 2
    let (mut sh, mut sw) = (down(h), down(w)); // stem conv
    sh = down(sh);
    sw = down(sw); // stem pool

    let mut blocks = Vec::new();
    let mut cin = 64;
    for (si, (filters, count)) in STACKS.into_iter().enumerate() {
        for bi in 0..count {
            let last = bi == count - 1;
            let stride = if last && si < 3 { 2 } else { 1 };
            blocks.push(Bottleneck::new(
                store,
                &format!("resnet50v2.stack{}.block{}", si + 1, bi + 1),
                cin,
                filters,
                stride,
                bi == 0,
            )?);
            cin = 4 * filters;
            if stride == 2 {
                sh = down(sh);
                sw = down(sw);
            }
        }
    }
    let post_bn = BatchNorm2d::new(store, "resnet50v2.post_bn", cin, BN)?;
    Ok((ResNet50V2 { stem_conv, blocks, post_bn }, (sh, sw, cin)))
}
