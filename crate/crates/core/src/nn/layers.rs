//! Trainable layers: convolution, depthwise convolution, dense, batch norm.
//!
//! Layers register their tensors in a [`ParamStore`](super::ParamStore) under
//! dotted names at construction time and hold cheap handles afterwards, so
//! snapshot/restore and checkpointing see every parameter without the layers
//! cooperating.

use candle_core::{Result, Tensor, Var};

use super::conv::{self, Padding};
use super::store::{Init, ParamStore};

/// 2-D convolution layer (NCHW).
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
        bias: bool,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        let rf = kh * kw;
        let weight = store.var(
            &format!("{name}.weight"),
            (cout, cin, kh, kw),
            Init::GlorotUniform { fan_in: cin * rf, fan_out: cout * rf },
        )?;
        let bias = if bias {
            Some(store.var(&format!("{name}.bias"), cout, Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv::conv2d(x, self.weight.as_tensor(), self.padding, self.stride)?;
        match &self.bias {
            None => Ok(y),
            Some(b) => {
                let c = b.as_tensor().dim(0)?;
                y.broadcast_add(&b.as_tensor().reshape((1, c, 1, 1))?)
            }
        }
    }
}

/// Depthwise 2-D convolution layer (one filter per input channel).
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    weight: Var,
    stride: usize,
    padding: Padding,
}

impl DepthwiseConv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let rf = kernel * kernel;
        let weight = store.var(
            &format!("{name}.weight"),
            (channels, 1, kernel, kernel),
            Init::GlorotUniform { fan_in: channels * rf, fan_out: rf },
        )?;
        Ok(Self { weight, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv::depthwise_conv2d(x, self.weight.as_tensor(), self.padding, self.stride)
    }
}

/// Fully connected layer on (B, in) inputs.
#[derive(Debug, Clone)]
pub struct Dense {
    weight: Var,
    bias: Var,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.var(
            &format!("{name}.weight"),
            (fan_in, fan_out),
            Init::GlorotUniform { fan_in, fan_out },
        )?;
        let bias = store.var(&format!("{name}.bias"), fan_out, Init::Const(0.0))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(self.weight.as_tensor())?.broadcast_add(self.bias.as_tensor())
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }
}

/// Batch normalization over the channel axis of NCHW tensors.
///
/// Training mode normalizes with the biased batch statistics and folds them
/// into the running estimates as `moving ← moving·momentum + batch·(1−momentum)`;
/// inference mode normalizes with the running estimates. `scale: false` drops
/// the learnable gamma (some architectures omit it before an activation that
/// follows with its own scale).
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Option<Var>,
    beta: Var,
    moving_mean: Var,
    moving_var: Var,
    momentum: f64,
    eps: f64,
}

/// Batch-norm hyperparameters. Momentum and epsilon differ between the
/// architecture families, so they are explicit here.
#[derive(Debug, Clone, Copy)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
    pub scale: bool,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self { momentum: 0.99, eps: 1e-3, scale: true }
    }
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, cfg: BatchNormConfig) -> Result<Self> {
        let gamma = if cfg.scale {
            Some(store.var(&format!("{name}.gamma"), channels, Init::Const(1.0))?)
        } else {
            None
        };
        let beta = store.var(&format!("{name}.beta"), channels, Init::Const(0.0))?;
        let moving_mean = store.buffer(&format!("{name}.moving_mean"), channels, 0.0)?;
        let moving_var = store.buffer(&format!("{name}.moving_var"), channels, 1.0)?;
        Ok(Self { gamma, beta, moving_mean, moving_var, momentum: cfg.momentum, eps: cfg.eps })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        let shape = (1, c, 1, 1);
        let (mean, var) = if training {
            let mean = x.mean_keepdim(3)?.mean_keepdim(2)?.mean_keepdim(0)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(2)?.mean_keepdim(0)?;
            self.update_moving(&mean.flatten_all()?.detach(), &var.flatten_all()?.detach())?;
            (mean, var)
        } else {
            (
                self.moving_mean.as_tensor().reshape(shape)?,
                self.moving_var.as_tensor().reshape(shape)?,
            )
        };
        let denom = var.broadcast_add(&Tensor::full(self.eps, (), x.device())?.to_dtype(x.dtype())?)?.sqrt()?;
        let mut y = x.broadcast_sub(&mean)?.broadcast_div(&denom)?;
        if let Some(g) = &self.gamma {
            y = y.broadcast_mul(&g.as_tensor().reshape(shape)?)?;
        }
        y.broadcast_add(&self.beta.as_tensor().reshape(shape)?)
    }

    fn update_moving(&self, batch_mean: &Tensor, batch_var: &Tensor) -> Result<()> {
        let m = self.momentum;
        let new_mean = ((self.moving_mean.as_tensor() * m)? + (batch_mean * (1.0 - m))?)?;
        let new_var = ((self.moving_var.as_tensor() * m)? + (batch_var * (1.0 - m))?)?;
        self.moving_mean.set(&new_mean)?;
        self.moving_var.set(&new_var)?;
        Ok(())
    }
}

/// ReLU capped at 6, as used by the mobile architecture.
pub fn relu6(x: &Tensor) -> Result<Tensor> {
    x.clamp(0f32, 6f32)
}

/// x·sigmoid(x), the activation used by the scaled architecture family.
pub fn swish(x: &Tensor) -> Result<Tensor> {
    x * candle_nn::ops::sigmoid(x)?
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn store() -> ParamStore {
        ParamStore::new(7)
    }

    #[test]
    fn conv_layer_applies_bias() {
        let mut s = store();
        let conv = Conv2d::new(&mut s, "c", 2, 3, (1, 1), 1, Padding::Valid, true).unwrap();
        // Zero input → output is exactly the bias (zero-initialized here, so set it).
        let x = Tensor::zeros((1, 2, 4, 4), candle_core::DType::F32, &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 3, 4, 4]);
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&a| a == 0.0));
        assert_eq!(s.trainable_parameter_count(), 2 * 3 + 3);
    }

    #[test]
    fn dense_matches_manual_matmul() {
        let mut s = store();
        let d = Dense::new(&mut s, "fc", 4, 2).unwrap();
        let x = Tensor::from_vec(vec![1f32, 2.0, 3.0, 4.0], (1, 4), &Device::Cpu).unwrap();
        let y = d.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2]);
        assert_eq!(s.trainable_parameter_count(), 4 * 2 + 2);
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let mut s = store();
        let bn = BatchNorm2d::new(&mut s, "bn", 1, BatchNormConfig::default()).unwrap();
        // Known data: mean 5, biased variance 4 over the batch.
        let x = Tensor::from_vec(vec![3f32, 7.0, 3.0, 7.0], (4, 1, 1, 1), &Device::Cpu).unwrap();
        let y = bn.forward(&x, true).unwrap();
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        // (3-5)/sqrt(4+1e-3) ≈ -0.999875
        assert!((v[0] + 0.999875).abs() < 1e-4, "{v:?}");
        assert!((v[1] - 0.999875).abs() < 1e-4);
        // Moving stats updated once: mean = 0*0.99 + 5*0.01, var = 1*0.99 + 4*0.01.
        let mm: Vec<f32> = bn.moving_mean.as_tensor().to_vec1().unwrap();
        let mv: Vec<f32> = bn.moving_var.as_tensor().to_vec1().unwrap();
        assert!((mm[0] - 0.05).abs() < 1e-6);
        assert!((mv[0] - 1.03).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_eval_uses_moving_stats() {
        let mut s = store();
        let bn = BatchNorm2d::new(&mut s, "bn", 2, BatchNormConfig::default()).unwrap();
        // Fresh stats are mean 0 / var 1, so eval is ≈ identity.
        let x = Tensor::from_vec(vec![1f32, -2.0, 0.5, 3.0], (1, 2, 1, 2), &Device::Cpu).unwrap();
        let y = bn.forward(&x, false).unwrap();
        let xin: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        for (a, b) in xin.iter().zip(&v) {
            assert!((a / (1.0f32 + 1e-3).sqrt() - b).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_scale_false_has_no_gamma() {
        let mut s = store();
        let cfg = BatchNormConfig { scale: false, ..Default::default() };
        let _bn = BatchNorm2d::new(&mut s, "bn", 8, cfg).unwrap();
        // beta only among trainables; both moving stats among buffers.
        assert_eq!(s.trainable_parameter_count(), 8);
        assert_eq!(s.non_trainable_parameter_count(), 16);
    }

    #[test]
    fn batchnorm_gradients_flow_in_training_mode() {
        let mut s = store();
        let bn = BatchNorm2d::new(&mut s, "bn", 3, BatchNormConfig::default()).unwrap();
        let x = Var::from_tensor(
            &Tensor::rand(0f32, 1f32, (2, 3, 4, 4), &Device::Cpu).unwrap(),
        )
        .unwrap();
        let y = bn.forward(x.as_tensor(), true).unwrap();
        let grads = y.sqr().unwrap().mean_all().unwrap().backward().unwrap();
        assert!(grads.get(x.as_tensor()).is_some());
        for v in s.trainable_vars() {
            assert!(grads.get(v.as_tensor()).is_some(), "missing grad for a bn parameter");
        }
    }

    #[test]
    fn activation_helpers() {
        let x = Tensor::from_vec(vec![-1f32, 0.0, 3.0, 9.0], (4,), &Device::Cpu).unwrap();
        let r: Vec<f32> = relu6(&x).unwrap().to_vec1().unwrap();
        assert_eq!(r, vec![0.0, 0.0, 3.0, 6.0]);
        let s: Vec<f32> = swish(&x).unwrap().to_vec1().unwrap();
        assert!((s[1]).abs() < 1e-7);
        assert!((s[2] - 3.0 / (1.0 + (-3f32).exp())).abs() < 1e-6);
    }
}
