//! Named trainable parameters with seeded initialization.
//!
//! Initialization draws from a caller-provided ChaCha stream instead of the
//! tensor library's global generator, so a model is reproducible from its seed.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    entries: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            entries: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_parameters(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn insert(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.entries.push((name, var));
        Ok(out)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name.into(), vec![0.0; n], shape)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name.into(), vec![value; n], shape)
    }

    /// Normal(0, std) truncated at two standard deviations.
    pub fn trunc_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        self.insert(name.into(), values, shape)
    }

    pub fn uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name.into(), values, shape)
    }

    /// Adds independent `Normal(0, std)` noise to every parameter whose name
    /// satisfies `select`.
    pub fn perturb(&self, std: f64, rng: &mut ChaCha8Rng, select: impl Fn(&str) -> bool) -> Result<()> {
        for (name, var) in &self.entries {
            if !select(name) {
                continue;
            }
            let noise: Vec<f64> = (0..var.elem_count())
                .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect();
            let noise = Tensor::from_vec(noise, var.dims(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&(var.as_tensor() + noise)?)?;
        }
        Ok(())
    }

    /// Overwrites a parameter in place; the shape must match.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

/// Fully connected layer storing `weight` as `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
pub enum LinearInit {
    /// Truncated normal with the given std, zero bias.
    TruncNormal(f64),
    /// All weights and bias zero.
    Zeros,
    /// Kaiming-uniform weights, uniform bias, both with bound `1/sqrt(fan_in)` scaled.
    KaimingUniform,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: LinearInit,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        let (weight, bias) = match init {
            LinearInit::TruncNormal(std) => (
                store.trunc_normal(wname, &[out_dim, in_dim], std, rng)?,
                store.zeros(bname, &[out_dim])?,
            ),
            LinearInit::Zeros => (
                store.zeros(wname, &[out_dim, in_dim])?,
                store.zeros(bname, &[out_dim])?,
            ),
            LinearInit::KaimingUniform => {
                let bound = (6.0 / in_dim as f64).sqrt();
                let bbound = 1.0 / (in_dim as f64).sqrt();
                (
                    store.uniform(wname, &[out_dim, in_dim], bound, rng)?,
                    store.uniform(bname, &[out_dim], bbound, rng)?,
                )
            }
        };
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies to the last dimension of `x` (any rank >= 2).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / in_dim;
        let flat = x.reshape((rows, in_dim))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last dimension without learned affine terms.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let last = x.rank() - 1;
    let mean = x.mean_keepdim(last)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(last)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

pub const LN_EPS: f64 = 1e-6;
