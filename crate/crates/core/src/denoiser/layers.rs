//! Transformer building blocks with adaLN-Zero modulation.

use candle_core::{DType, Device, Tensor, D};
use rand_chacha::ChaCha8Rng;

use super::config::{num_heads, TIME_FEATURES};
use crate::error::Result;
use crate::params::{layer_norm, Linear, LinearInit, ParamStore, LN_EPS};

pub const INIT_STD: f64 = 0.02;

fn linear(store: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut ChaCha8Rng) -> Result<Linear> {
    Linear::new(store, name, i, o, LinearInit::TruncNormal(INIT_STD), rng)
}

/// Multi-head scaled dot-product attention from `x` onto `context`.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        context_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            q: linear(store, &format!("{name}.q"), dim, dim, rng)?,
            k: linear(store, &format!("{name}.k"), context_dim, dim, rng)?,
            v: linear(store, &format!("{name}.v"), context_dim, dim, rng)?,
            o: linear(store, &format!("{name}.o"), dim, dim, rng)?,
            heads: num_heads(dim),
        })
    }

    /// `x: [Tq, D]`, `context: [Tk, Dc]` -> `[Tq, D]`.
    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (tq, dim) = x.dims2()?;
        let tk = context.dims()[0];
        let hd = dim / self.heads;
        let split = |t: Tensor, n: usize| -> Result<Tensor> {
            Ok(t.reshape((n, self.heads, hd))?.transpose(0, 1)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?, tq)?;
        let k = split(self.k.forward(context)?, tk)?;
        let v = split(self.v.forward(context)?, tk)?;
        let scores = (q.matmul(&k.transpose(1, 2)?)? * (1.0 / (hd as f64).sqrt()))?;
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = probs.matmul(&v)?.transpose(0, 1)?.contiguous()?.reshape((tq, dim))?;
        self.o.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, ratio: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            fc1: linear(store, &format!("{name}.fc1"), dim, dim * ratio, rng)?,
            fc2: linear(store, &format!("{name}.fc2"), dim * ratio, dim, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Per-sub-block shift, scale and gate, each `[1 or T, D]`.
#[derive(Debug, Clone)]
pub struct Modulation {
    pub shift: Tensor,
    pub scale: Tensor,
    pub gate: Tensor,
}

/// Projections of the conditioning vector to a [`Modulation`]; the gate
/// projection starts at zero so the sub-block starts as the identity.
#[derive(Debug, Clone)]
pub struct AdaLn {
    shift: Linear,
    scale: Linear,
    gate: Linear,
}

impl AdaLn {
    pub fn new(store: &mut ParamStore, name: &str, cond_dim: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            shift: linear(store, &format!("{name}.shift"), cond_dim, dim, rng)?,
            scale: linear(store, &format!("{name}.scale"), cond_dim, dim, rng)?,
            gate: Linear::new(store, &format!("{name}.gate"), cond_dim, dim, LinearInit::Zeros, rng)?,
        })
    }

    /// `cond_act` is the already activated conditioning, `SiLU(c)`.
    pub fn modulation(&self, cond_act: &Tensor) -> Result<Modulation> {
        Ok(Modulation {
            shift: self.shift.forward(cond_act)?,
            scale: self.scale.forward(cond_act)?,
            gate: self.gate.forward(cond_act)?,
        })
    }
}

/// `x + gate * f(LN(x) * (1 + scale) + shift)`.
pub fn modulated_residual(
    x: &Tensor,
    m: &Modulation,
    f: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let h = layer_norm(x, LN_EPS)?
        .broadcast_mul(&(&m.scale + 1.0)?)?
        .broadcast_add(&m.shift)?;
    Ok((x + f(&h)?.broadcast_mul(&m.gate)?)?)
}

/// `[cos(t f_i), sin(t f_i)]` with geometric frequencies `f_i = 10000^(-i/half)`.
pub fn sinusoidal_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
    let (cos, sin): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((t * f).cos(), (t * f).sin())).unzip();
    let mut out = cos;
    out.extend(sin);
    out.resize(dim, 0.0);
    out
}

/// Timestep -> `[1, D]` via sinusoidal features and a two-layer MLP.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    fc1: Linear,
    fc2: Linear,
    dtype: DType,
}

impl TimeEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            fc1: linear(store, &format!("{name}.fc1"), TIME_FEATURES, dim, rng)?,
            fc2: linear(store, &format!("{name}.fc2"), dim, dim, rng)?,
            dtype: store.dtype(),
        })
    }

    pub fn forward(&self, t: usize) -> Result<Tensor> {
        let feats = Tensor::from_vec(sinusoidal_features(t as f64, TIME_FEATURES), (1, TIME_FEATURES), &Device::Cpu)?
            .to_dtype(self.dtype)?;
        self.fc2.forward(&self.fc1.forward(&feats)?.silu()?)
    }
}
