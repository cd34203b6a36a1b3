//! Named parameter store: trainable variables, non-trainable buffers,
//! deterministic initialization, and safetensors round-trips.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{bail, DType, Device, Result, Tensor, Var};
use rand::Rng;

use super::rng::rng_for;

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)) — the reference framework's
    /// default for conv and dense kernels.
    GlorotUniform { fan_in: usize, fan_out: usize },
    Const(f64),
}

/// Holds every tensor of a model under a unique dotted name.
///
/// Trainable variables and non-trainable buffers (batch-norm running
/// statistics) live in separate maps; both are saved and restored together.
/// Initialization depends only on `(seed, name)`, never on creation order, so
/// a truncated model's retained layers get bit-identical weights to the full
/// model built from the same seed.
pub struct ParamStore {
    device: Device,
    seed: u64,
    vars: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { device: Device::Cpu, seed, vars: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Create (and register) a trainable variable.
    pub fn var<S: Into<candle_core::Shape>>(&mut self, name: &str, shape: S, init: Init) -> Result<Var> {
        let shape = shape.into();
        if self.vars.contains_key(name) || self.buffers.contains_key(name) {
            bail!("duplicate parameter name: {name}")
        }
        let n: usize = shape.elem_count();
        let data: Vec<f32> = match init {
            Init::GlorotUniform { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = rng_for(self.seed, name);
                (0..n).map(|_| (rng.random_range(-limit..limit)) as f32).collect()
            }
            Init::Const(v) => vec![v as f32; n],
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Create (and register) a non-trainable buffer.
    pub fn buffer<S: Into<candle_core::Shape>>(&mut self, name: &str, shape: S, fill: f64) -> Result<Var> {
        if self.vars.contains_key(name) || self.buffers.contains_key(name) {
            bail!("duplicate buffer name: {name}")
        }
        let shape = shape.into();
        let n = shape.elem_count();
        let var = Var::from_tensor(&Tensor::from_vec(vec![fill as f32; n], shape, &self.device)?)?;
        self.buffers.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Trainable variables in name order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn var_names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    /// Exact count of trainable scalar weights.
    pub fn trainable_parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.as_tensor().elem_count()).sum()
    }

    /// Count of non-trainable scalars (running statistics).
    pub fn non_trainable_parameter_count(&self) -> usize {
        self.buffers.values().map(|v| v.as_tensor().elem_count()).sum()
    }

    /// Trainable parameters whose name starts with `prefix`.
    pub fn trainable_parameter_count_under(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    /// In-memory copy of every tensor (used for best-weights restore).
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (k, v) in self.vars.iter().chain(self.buffers.iter()) {
            out.insert(k.clone(), v.as_tensor().copy()?);
        }
        Ok(out)
    }

    /// Write a snapshot back into the live variables.
    pub fn restore(&self, snap: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, v) in self.vars.iter().chain(self.buffers.iter()) {
            let t = snap
                .get(k)
                .ok_or_else(|| candle_core::Error::Msg(format!("snapshot missing tensor {k}")))?;
            v.set(t)?;
        }
        Ok(())
    }

    /// Save every tensor to a safetensors file.
    pub fn save_safetensors(&self, path: &Path) -> Result<()> {
        let mut map = std::collections::HashMap::new();
        for (k, v) in self.vars.iter().chain(self.buffers.iter()) {
            map.insert(k.clone(), v.as_tensor().clone());
        }
        candle_core::safetensors::save(&map, path)
    }

    /// Load a safetensors file; the key set and every shape must match exactly.
    pub fn load_safetensors_strict(&self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        let expected: Vec<&String> = self.vars.keys().chain(self.buffers.keys()).collect();
        if loaded.len() != expected.len() {
            bail!(
                "weight file has {} tensors, model expects {}",
                loaded.len(),
                expected.len()
            )
        }
        for (k, v) in self.vars.iter().chain(self.buffers.iter()) {
            let t = match loaded.get(k) {
                Some(t) => t,
                None => bail!("weight file missing tensor {k}"),
            };
            if t.shape() != v.as_tensor().shape() {
                bail!(
                    "tensor {k} shape mismatch: file {:?}, model {:?}",
                    t.shape(),
                    v.as_tensor().shape()
                )
            }
            v.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }
}
