//! Toy caption encoder: whitespace tokens over the caption vocabulary, a
//! learned embedding table and a small pre-norm transformer.

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;

use super::layers::{Attention, Mlp, INIT_STD};
use crate::data::caption_vocabulary;
use crate::error::{Error, Result};
use crate::params::{layer_norm, ParamStore, LN_EPS};

pub const UNKNOWN_TOKEN: u32 = 1;

#[derive(Debug, Clone)]
struct TextLayer {
    attn: Attention,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct TextEmbedder {
    vocab: Vec<String>,
    table: Tensor,
    positions: Tensor,
    layers: Vec<TextLayer>,
    null: Tensor,
    max_len: usize,
}

impl TextEmbedder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        num_layers: usize,
        max_len: usize,
        mlp_ratio: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let vocab = caption_vocabulary();
        let table = store.trunc_normal(format!("{name}.table"), &[vocab.len(), dim], INIT_STD, rng)?;
        let positions = store.trunc_normal(format!("{name}.positions"), &[max_len, dim], INIT_STD, rng)?;
        let layers = (0..num_layers)
            .map(|i| {
                Ok(TextLayer {
                    attn: Attention::new(store, &format!("{name}.layers.{i}.attn"), dim, dim, rng)?,
                    mlp: Mlp::new(store, &format!("{name}.layers.{i}.mlp"), dim, mlp_ratio, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let null = store.trunc_normal(format!("{name}.null"), &[1, dim], INIT_STD, rng)?;
        Ok(Self {
            vocab,
            table,
            positions,
            layers,
            null,
            max_len,
        })
    }

    /// Lower-cased whitespace tokens, truncated to the maximum length.
    pub fn tokenize(&self, prompt: &str) -> Vec<u32> {
        prompt
            .split_whitespace()
            .take(self.max_len)
            .map(|w| {
                let w = w.to_lowercase();
                self.vocab
                    .iter()
                    .position(|v| *v == w)
                    .map_or(UNKNOWN_TOKEN, |i| i as u32)
            })
            .collect()
    }

    /// `[L, D]` token embeddings of a caption.
    pub fn encode(&self, prompt: &str) -> Result<Tensor> {
        let ids = self.tokenize(prompt);
        if ids.is_empty() {
            return Err(Error::Config("empty text prompt".into()));
        }
        let n = ids.len();
        let ids = Tensor::from_vec(ids, n, &Device::Cpu)?;
        let mut x = self
            .table
            .index_select(&ids, 0)?
            .add(&self.positions.narrow(0, 0, n)?)?;
        for layer in &self.layers {
            let h = layer_norm(&x, LN_EPS)?;
            x = (&x + layer.attn.forward(&h, &h)?)?;
            x = (&x + layer.mlp.forward(&layer_norm(&x, LN_EPS)?)?)?;
        }
        layer_norm(&x, LN_EPS)
    }

    /// Learned embedding standing in for a dropped caption, `[1, D]`.
    pub fn null(&self) -> Tensor {
        self.null.clone()
    }
}
