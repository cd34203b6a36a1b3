//! Adam optimizer with the reference framework's defaults (lr 1e-3, β₁ 0.9,
//! β₂ 0.999, ε 1e-7 — note the epsilon, which differs from other frameworks).

use candle_core::backprop::GradStore;
use candle_core::{Result, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-7 }
    }
}

pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
    cfg: AdamConfig,
}

impl Adam {
    pub fn new(vars: Vec<Var>, cfg: AdamConfig) -> Result<Self> {
        let m = vars
            .iter()
            .map(|p| Tensor::zeros(p.shape(), p.dtype(), p.device()))
            .collect::<Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { vars, m, v, t: 0, cfg })
    }

    pub fn learning_rate(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One update from a populated gradient store. Parameters without a
    /// gradient (not touched by the loss) are left unchanged.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t);
        for (i, p) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(p.as_tensor()) else { continue };
            let m = ((&self.m[i] * self.cfg.beta1)? + (g * (1.0 - self.cfg.beta1))?)?;
            let v = ((&self.v[i] * self.cfg.beta2)? + (g.sqr()? * (1.0 - self.cfg.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let denom = (v_hat.sqrt()? + self.cfg.eps)?;
            let update = ((m_hat / denom)? * self.cfg.lr)?;
            p.set(&p.sub(&update)?)?;
            // The moments are built from gradient tensors, which carry the op
            // graph of the whole forward+backward pass. Stored as-is they would
            // chain those graphs across steps and memory would grow without
            // bound, so keep only the values.
            self.m[i] = m.detach();
            self.v[i] = v.detach();
        }
        Ok(())
    }
}
