//! Classic 16-layer plain convolutional backbone: five blocks of 3×3
//! convolutions (with biases, no batch norm) separated by 2×2 max pooling.

use candle_core::{Result, Tensor};

use crate::nn::{max_pool2d, Conv2d, Padding, ParamStore};

use super::Net;

pub(crate) struct Vgg16 {
    // (convs of the block); a 2×2/s2 max pool follows each block.
    blocks: Vec<Vec<Conv2d>>,
}

impl Net for Vgg16 {
    fn forward(&self, x: &Tensor, _training: bool) -> Result<Tensor> {
        let mut x = x.clone();
        for block in &self.blocks {
            for conv in block {
                x = conv.forward(&x)?.relu()?;
            }
            x = max_pool2d(&x, 2, 2, Padding::Valid)?;
        }
        Ok(x)
    }
}

pub(crate) fn build(
    store: &mut ParamStore,
    (h, w): (usize, usize),
) -> Result<(Vgg16, (usize, usize, usize))> {
    const PLAN: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    let mut blocks = Vec::new();
    let mut cin = 3;
    let (mut sh, mut sw) = (h, w);
    for (bi, (filters, convs)) in PLAN.into_iter().enumerate() {
        let mut block = Vec::new();
        for ci in 0..convs {
            block.push(Conv2d::new(
                store,
                &format!("vgg16.block{}.conv{}", bi + 1, ci + 1),
                cin,
                filters,
                (3, 3),
                1,
                Padding::Same,
                true,
            )?);
            cin = filters;
        }
        blocks.push(block);
        sh /= 2;
        sw /= 2;
    }
    Ok((Vgg16 { blocks }, (sh, sw, 512)))
}

#[cfg(test)]
mod tests {
    use crate::backbones::{build_backbone, BackboneName, BackboneSpec};
    use candle_core::{Device, Tensor};

    #[test]
    fn parameter_count_matches_reference() {
        let ex = build_backbone(&BackboneSpec::new(BackboneName::Vgg16), 1).unwrap();
        assert_eq!(ex.trainable_parameter_count(), 14_714_688);
        assert_eq!(ex.store().non_trainable_parameter_count(), 0);
        assert_eq!(ex.output_shape(), (8, 8, 512));
    }

    #[test]
    fn forward_shape() {
        let mut spec = BackboneSpec::new(BackboneName::Vgg16);
        spec.input_shape = (64, 64, 3);
        let ex = build_backbone(&spec, 1).unwrap();
        let x = Tensor::rand(-1f32, 1f32, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let y = ex.forward(&x, false).unwrap();
        assert_eq!(y.dims(), &[1, 512, 2, 2]);
        assert_eq!(ex.output_shape(), (2, 2, 512));
    }
}
