//! Compound-scaled mobile backbone (the B4 variant): inverted-residual
//! blocks with squeeze-and-excitation and swish activations. Widths and
//! depths are the base configuration scaled by 1.4/1.8 with divisor-8
//! filter rounding.

use candle_core::{Result, Tensor};

use crate::nn::{
    global_avg_pool, swish, BatchNorm2d, BatchNormConfig, Conv2d, DepthwiseConv2d, Padding,
    ParamStore,
};

use super::Net;

const BN: BatchNormConfig = BatchNormConfig { momentum: 0.99, eps: 1e-3, scale: true };

struct ConvBnSwish {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnSwish {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, (kernel, kernel), stride, Padding::Same, false)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout, BN)?,
        })
    }

    fn forward(&self, x: &Tensor, t: bool) -> Result<Tensor> {
        swish(&self.bn.forward(&self.conv.forward(x)?, t)?)
    }
}

struct MbConv {
    expand: Option<ConvBnSwish>,
    dw: DepthwiseConv2d,
    dw_bn: BatchNorm2d,
    se_reduce: Conv2d,
    se_expand: Conv2d,
    project: Conv2d,
    project_bn: BatchNorm2d,
    residual: bool,
}

impl MbConv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        expansion: usize,
        stride: usize,
    ) -> Result<Self> {
        let mid = cin * expansion;
        let se = (cin / 4).max(1); // squeeze width: a quarter of the block input
        Ok(Self {
            expand: if expansion != 1 {
                Some(ConvBnSwish::new(store, &format!("{name}.expand"), cin, mid, 1, 1)?)
            } else {
                None
            },
            dw: DepthwiseConv2d::new(store, &format!("{name}.depthwise"), mid, kernel, stride, Padding::Same)?,
            dw_bn: BatchNorm2d::new(store, &format!("{name}.depthwise_bn"), mid, BN)?,
            se_reduce: Conv2d::new(store, &format!("{name}.se_reduce"), mid, se, (1, 1), 1, Padding::Valid, true)?,
            se_expand: Conv2d::new(store, &format!("{name}.se_expand"), se, mid, (1, 1), 1, Padding::Valid, true)?,
            project: Conv2d::new(store, &format!("{name}.project"), mid, cout, (1, 1), 1, Padding::Valid, false)?,
            project_bn: BatchNorm2d::new(store, &format!("{name}.project_bn"), cout, BN)?,
            residual: stride == 1 && cin == cout,
        })
    }

    fn forward(&self, x: &Tensor, t: bool) -> Result<Tensor> {
        let mut y = match &self.expand {
            Some(e) => e.forward(x, t)?,
            None => x.clone(),
        };
        y = swish(&self.dw_bn.forward(&self.dw.forward(&y)?, t)?)?;
        // Squeeze-and-excitation: global pool → bottleneck → per-channel gate.
        let (b, c) = {
            let d = y.dims4()?;
            (d.0, d.1)
        };
        let s = global_avg_pool(&y)?.reshape((b, c, 1, 1))?;
        let s = swish(&self.se_reduce.forward(&s)?)?;
        let s = candle_nn::ops::sigmoid(&self.se_expand.forward(&s)?)?;
        y = y.broadcast_mul(&s)?;
        y = self.project_bn.forward(&self.project.forward(&y)?, t)?;
        if self.residual {
            y = (y + x)?;
        }
        Ok(y)
    }
}

pub(crate) struct EfficientNetB4 {
    stem: ConvBnSwish,
    blocks: Vec<MbConv>,
    head: ConvBnSwish,
}

impl Net for EfficientNetB4 {
    fn forward(&self, x: &Tensor, t: bool) -> Result<Tensor> {
        let mut x = self.stem.forward(x, t)?;
        for b in &self.blocks {
            x = b.forward(&x, t)?;
        }
        self.head.forward(&x, t)
    }
}

pub(crate) fn build(
    store: &mut ParamStore,
    (h, w): (usize, usize),
) -> Result<(EfficientNetB4, (usize, usize, usize))> {
    // Base config scaled for B4: (kernel, blocks, cout, expansion, first stride).
    const STAGES: [(usize, usize, usize, usize, usize); 7] = [
        (3, 2, 24, 1, 1),
        (3, 4, 32, 6, 2),
        (5, 4, 56, 6, 2),
        (3, 6, 112, 6, 2),
        (5, 6, 160, 6, 1),
        (5, 8, 272, 6, 2),
        (3, 2, 448, 6, 1),
    ];

    let stem = ConvBnSwish::new(store, "efficientnetb4.stem", 3, 48, 3, 2)?;
    let (mut sh, mut sw) = (h.div_ceil(2), w.div_ceil(2));
    let mut blocks = Vec::new();
    let mut cin = 48;
    for (si, (kernel, count, cout, expansion, stride)) in STAGES.into_iter().enumerate() {
        for bi in 0..count {
            let s = if bi == 0 { stride } else { 1 };
            blocks.push(MbConv::new(
                store,
                &format!("efficientnetb4.stage{}.block{}", si + 1, bi + 1),
                cin,
                cout,
                kernel,
                expansion,
                s,
            )?);
            if s == 2 {
                sh = sh.div_ceil(2);
                sw = sw.div_ceil(2);
            }
            cin = cout;
        }
    }
    let head = ConvBnSwish::new(store, "efficientnetb4.head", cin, 1792, 1, 1)?;
    Ok((EfficientNetB4 { stem, blocks, head }, (sh, sw, 1792)))
}

#[cfg(test)]
mod tests {
    use crate::backbones::{build_backbone, BackboneName, BackboneSpec};
    use candle_core::{Device, Tensor};

    #[test]
    fn parameter_count_matches_reference() {
        let ex = build_backbone(&BackboneSpec::new(BackboneName::EfficientNetB4), 1).unwrap();
        assert_eq!(ex.trainable_parameter_count(), 17_548_616);
        assert_eq!(ex.store().non_trainable_parameter_count(), 125_200);
        assert_eq!(ex.output_shape(), (8, 8, 1792));
    }

    #[test]
    fn forward_shape() {
        let mut spec = BackboneSpec::new(BackboneName::EfficientNetB4);
        spec.input_shape = (64, 64, 3);
        let ex = build_backbone(&spec, 1).unwrap();
        let x = Tensor::rand(-1f32, 1f32, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let y = ex.forward(&x, false).unwrap();
        assert_eq!(y.dims(), &[1, 1792, 2, 2]);
        assert_eq!(ex.output_shape(), (2, 2, 1792));
    }
}
