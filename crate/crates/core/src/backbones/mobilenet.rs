//! Mobile inverted-residual backbone (v2): expansion 1×1, depthwise 3×3,
//! linear projection 1×1, with ReLU6 activations and residual adds on
//! stride-1 same-width blocks.

use candle_core::{Result, Tensor};

use crate::nn::{
    relu6, BatchNorm2d, BatchNormConfig, Conv2d, DepthwiseConv2d, Padding, ParamStore,
};

use super::Net;

const BN: BatchNormConfig = BatchNormConfig { momentum: 0.999, eps: 1e-3, scale: true };

struct ConvBnRelu6 {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu6 {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, (kernel, kernel), stride, padding, false)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout, BN)?,
        })
    }

    fn forward(&self, x: &Tensor, t: bool) -> Result<Tensor> {
        relu6(&self.bn.forward(&self.conv.forward(x)?, t)?)
    }
}

struct InvertedResidual {
    expand: Option<ConvBnRelu6>,
    dw: DepthwiseConv2d,
    dw_bn: BatchNorm2d,
    project: Conv2d,
    project_bn: BatchNorm2d,
    residual: bool,
}

impl InvertedResidual {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        expansion: usize,
        stride: usize,
    ) -> Result<Self> {
        let mid = cin * expansion;
        let expand = if expansion != 1 {
            Some(ConvBnRelu6::new(store, &format!("{name}.expand"), cin, mid, 1, 1, Padding::Valid)?)
        } else {
            None
        };
        Ok(Self {
            expand,
            dw: DepthwiseConv2d::new(store, &format!("{name}.depthwise"), mid, 3, stride, Padding::Same)?,
            dw_bn: BatchNorm2d::new(store, &format!("{name}.depthwise_bn"), mid, BN)?,
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
        y = relu6(&self.dw_bn.forward(&self.dw.forward(&y)?, t)?)?;
        y = self.project_bn.forward(&self.project.forward(&y)?, t)?;
        if self.residual {
            y = (y + x)?;
        }
        Ok(y)
    }
}

pub(crate) struct MobileNetV2 {
    stem: ConvBnRelu6,
    blocks: Vec<InvertedResidual>,
    head: ConvBnRelu6,
}

impl Net for MobileNetV2 {
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
) -> Result<(MobileNetV2, (usize, usize, usize))> {
    const FILTERS: [usize; 17] = [16, 24, 24, 32, 32, 32, 64, 64, 64, 64, 96, 96, 96, 160, 160, 160, 320];
    const STRIDES: [usize; 17] = [1, 2, 1, 2, 1, 1, 2, 1, 1, 1, 1, 1, 1, 2, 1, 1, 1];

    let stem = ConvBnRelu6::new(store, "mobilenetv2.stem", 3, 32, 3, 2, Padding::Same)?;
    let (mut sh, mut sw) = (h.div_ceil(2), w.div_ceil(2));
    let mut blocks = Vec::new();
    let mut cin = 32;
    for i in 0..17 {
        let expansion = if i == 0 { 1 } else { 6 };
        blocks.push(InvertedResidual::new(
            store,
            &format!("mobilenetv2.block{i}"),
            cin,
            FILTERS[i],
            expansion,
            STRIDES[i],
        )?);
        if STRIDES[i] == 2 {
            sh = sh.div_ceil(2);
            sw = sw.div_ceil(2);
        }
        cin = FILTERS[i];
    }
    let head = ConvBnRelu6::new(store, "mobilenetv2.head", cin, 1280, 1, 1, Padding::Valid)?;
    Ok((MobileNetV2 { stem, blocks, head }, (sh, sw, 1280)))
}
