//! Densely connected backbone (201 layers): four dense blocks whose layers
//! each append `growth_rate` channels via a 1×1 bottleneck and a 3×3 conv,
//! separated by half-width transition layers with 2×2 average pooling.

use candle_core::{Result, Tensor};

use crate::nn::{max_pool2d, BatchNorm2d, BatchNormConfig, Conv2d, Padding, ParamStore};

use super::Net;

const BN: BatchNormConfig = BatchNormConfig { momentum: 0.99, eps: 1.001e-5, scale: true };
const GROWTH: usize = 32;

struct DenseLayer {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
}

impl DenseLayer {
    fn new(store: &mut ParamStore, name: &str, cin: usize) -> Result<Self> {
        Ok(Self {
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), cin, BN)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, 4 * GROWTH, (1, 1), 1, Padding::Valid, false)?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), 4 * GROWTH, BN)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), 4 * GROWTH, GROWTH, (3, 3), 1, Padding::Same, false)?,
        })
    }

    fn forward(&self, x: &Tensor, t: bool) -> Result<Tensor> {
        let y = self.conv1.forward(&self.bn1.forward(x, t)?.relu()?)?;
        let y = self.conv2.forward(&self.bn2.forward(&y, t)?.relu()?)?;
        Tensor::cat(&[x.clone(), y], 1)
    }
}

struct Transition {
    bn: BatchNorm2d,
    conv: Conv2d,
}

impl Transition {
    fn new(store: &mut ParamStore, name: &str, cin: usize) -> Result<(Self, usize)> {
        let cout = cin / 2;
        Ok((
            Self {
                bn: BatchNorm2d::new(store, &format!("{name}.bn"), cin, BN)?,
                conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, (1, 1), 1, Padding::Valid, false)?,
            },
            cout,
        ))
    }

    fn forward(&self, x: &Tensor, t: bool) -> Result<Tensor> {
        self.conv.forward(&self.bn.forward(x, t)?.relu()?)?.avg_pool2d(2)
    }
}

pub(crate) struct DenseNet201 {
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    final_bn: BatchNorm2d,
}

impl Net for DenseNet201 {
    fn forward(&self, x: &Tensor, t: bool) -> Result<Tensor> {
        let mut x = self.stem_conv.forward(x)?;
        x = self.stem_bn.forward(&x, t)?.relu()?;
        x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        x = max_pool2d(&x, 3, 2, Padding::Valid)?;
        for (bi, block) in self.blocks.iter().enumerate() {
            for layer in block {
                x = layer.forward(&x, t)?;
            }
            if bi < self.transitions.len() {
                x = self.transitions[bi].forward(&x, t)?;
            }
        }
        self.final_bn.forward(&x, t)?.relu()
    }
}

pub(crate) fn build(
    store: &mut ParamStore,
    (h, w): (usize, usize),
) -> Result<(DenseNet201, (usize, usize, usize))> {
    const BLOCKS: [usize; 4] = [6, 12, 48, 32];

    let stem_conv =
        Conv2d::new(store, "densenet201.stem.conv", 3, 64, (7, 7), 2, Padding::Explicit(3, 3, 3, 3), false)?;
    let stem_bn = BatchNorm2d::new(store, "densenet201.stem.bn", 64, BN)?;
    let down = |n: usize| (n - 1) / 2 + 1;
    let (mut sh, mut sw) = (down(h), down(w));
    sh = down(sh);
    sw = down(sw);

    let mut cin = 64;
    let mut blocks = Vec::new();
    let mut transitions = Vec::new();
    for (bi, layers) in BLOCKS.into_iter().enumerate() {
        let mut block = Vec::new();
        for li in 0..layers {
            block.push(DenseLayer::new(store, &format!("densenet201.block{}.layer{}", bi + 1, li + 1), cin)?);
            cin += GROWTH;
        }
        blocks.push(block);
        if bi < 3 {
            let (t, cout) = Transition::new(store, &format!("densenet201.transition{}", bi + 1), cin)?;
            transitions.push(t);
            cin = cout;
            sh /= 2;
            sw /= 2;
        }
    }
    let final_bn = BatchNorm2d::new(store, "densenet201.final_bn", cin, BN)?;
    Ok((DenseNet201 { stem_conv, stem_bn, blocks, transitions, final_bn }, (sh, sw, cin)))
}

#[cfg(test)]
mod tests {
    use crate::backbones::{build_backbone, BackboneName, BackboneSpec};
    use candle_core::{Device, Tensor};

    #[test]
    fn parameter_count_matches_reference() {
        let ex = build_backbone(&BackboneSpec::new(BackboneName::DenseNet201), 1).unwrap();
        assert_eq!(ex.trainable_parameter_count(), 18_092_928);
        assert_eq!(ex.store().non_trainable_parameter_count(), 229_056);
        assert_eq!(ex.output_shape(), (8, 8, 1920));
    }

    #[test]
    fn forward_shape() {
        let mut spec = BackboneSpec::new(BackboneName::DenseNet201);
        spec.input_shape = (64, 64, 3);
        let ex = build_backbone(&spec, 1).unwrap();
        let x = Tensor::rand(-1f32, 1f32, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let y = ex.forward(&x, false).unwrap();
        assert_eq!(y.dims(), &[1, 1920, 2, 2]);
        assert_eq!(ex.output_shape(), (2, 2, 1920));
    }
}
