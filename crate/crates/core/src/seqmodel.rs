//! Post-norm transformer encoder over padded windows of visit vectors.

use mepoi_numcore::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::positional_encoding;
use crate::error::{contract, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub window: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig { layers: 4, heads: 8, ffn_dim: 1024, window: 32 }
    }
}

impl TransformerConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.heads == 0 || d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "transformer: model dim {d_model} not divisible by {} heads",
                self.heads
            )));
        }
        if self.window == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("transformer: window and ffn_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Fan-in scaled uniform initialisation for a `[fan_in, fan_out]` matrix.
pub fn init_linear<T: Scalar, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    Tensor::uniform(vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Copy, Debug)]
pub struct LayerParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub d_model: usize,
    pub layers: Vec<LayerParams>,
}

/// A batch of windows laid out as `[batch * len, d]` rows.
#[derive(Clone, Copy, Debug)]
pub struct BatchShape {
    pub batch: usize,
    pub len: usize,
}

impl Transformer {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &TransformerConfig,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(d_model)?;
        let d = d_model;
        let f = config.ffn_dim;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut add = |name: &str, t: Tensor<T>| store.add(format!("layer{l}.{name}"), t);
            layers.push(LayerParams {
                wq: add("wq", init_linear(d, d, rng))?,
                wk: add("wk", init_linear(d, d, rng))?,
                wv: add("wv", init_linear(d, d, rng))?,
                wo: add("wo", init_linear(d, d, rng))?,
                ln1_gain: add("ln1.gain", Tensor::ones(vec![d]))?,
                ln1_bias: add("ln1.bias", Tensor::zeros(vec![d]))?,
                w1: add("ffn.w1", init_linear(d, f, rng))?,
                b1: add("ffn.b1", Tensor::zeros(vec![f]))?,
                w2: add("ffn.w2", init_linear(f, d, rng))?,
                b2: add("ffn.b2", Tensor::zeros(vec![d]))?,
                ln2_gain: add("ln2.gain", Tensor::ones(vec![d]))?,
                ln2_bias: add("ln2.bias", Tensor::zeros(vec![d]))?,
            });
        }
        Ok(Transformer { config: config.clone(), d_model, layers })
    }

    /// Multi-head self-attention. `valid[b * len + j]` marks real tokens;
    /// padded keys receive zero weight.
    pub fn attention<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        p: &LayerParams,
        x: Var,
        shape: BatchShape,
        valid: &[bool],
    ) -> Result<Var> {
        let BatchShape { batch, len } = shape;
        let h = self.config.heads;
        let d = self.d_model;
        let dk = d / h;
        let split = |g: &mut Graph<'_, T>, w: ParamId| -> Result<Var> {
            let wv = g.param(w);
            let y = g.matmul(x, wv)?;
            let y = g.reshape(y, &[batch, len, h, dk])?;
            let y = g.permute_0213(y)?;
            Ok(g.reshape(y, &[batch * h, len, dk])?)
        };
        let q = split(g, p.wq)?;
        let k = split(g, p.wk)?;
        let v = split(g, p.wv)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
        let mut allowed = Vec::with_capacity(batch * h * len * len);
        for b in 0..batch {
            let keys = &valid[b * len..(b + 1) * len];
            for _ in 0..h * len {
                allowed.extend_from_slice(keys);
            }
        }
        let att = g.masked_softmax(scores, &allowed)?;
        let ctx = g.bmm(att, v, false)?;
        let ctx = g.reshape(ctx, &[batch, h, len, dk])?;
        let ctx = g.permute_0213(ctx)?;
        let ctx = g.reshape(ctx, &[batch * len, d])?;
        let wo = g.param(p.wo);
        Ok(g.matmul(ctx, wo)?)
    }

    pub fn layer<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        p: &LayerParams,
        x: Var,
        shape: BatchShape,
        valid: &[bool],
    ) -> Result<Var> {
        let att = self.attention(g, p, x, shape, valid)?;
        let r1 = g.add(x, att)?;
        let (g1, b1) = (g.param(p.ln1_gain), g.param(p.ln1_bias));
        let h1 = g.layer_norm(r1, g1, b1)?;
        let w1 = g.param(p.w1);
        let f = g.matmul(h1, w1)?;
        let fb = g.param(p.b1);
        let f = g.add_row(f, fb)?;
        let f = g.relu(f);
        let w2 = g.param(p.w2);
        let f = g.matmul(f, w2)?;
        let fb2 = g.param(p.b2);
        let f = g.add_row(f, fb2)?;
        let r2 = g.add(h1, f)?;
        let (g2, b2) = (g.param(p.ln2_gain), g.param(p.ln2_bias));
        Ok(g.layer_norm(r2, g2, b2)?)
    }

    /// Adds positional encodings and runs every layer. `x` holds
    /// `[batch * len, d]` visit vectors.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        shape: BatchShape,
        valid: &[bool],
    ) -> Result<Var> {
        let BatchShape { batch, len } = shape;
        if batch == 0 || len == 0 {
            return contract("cannot encode an empty window");
        }
        if len > self.config.window {
            return contract(format!("window of {len} visits exceeds w = {}", self.config.window));
        }
        if valid.len() != batch * len || g.shape(x) != [batch * len, self.d_model] {
            return contract(format!(
                "batch layout {batch}x{len} does not match input {:?} / mask {}",
                g.shape(x),
                valid.len()
            ));
        }
        if (0..batch).any(|b| !valid[b * len..(b + 1) * len].iter().any(|&v| v)) {
            return contract("window without any valid visit");
        }
        let pe = positional_table::<T>(len, self.d_model, batch);
        let pe = g.constant(pe);
        let mut h = g.add(x, pe)?;
        for p in &self.layers {
            h = self.layer(g, p, h, shape, valid)?;
        }
        Ok(h)
    }
}

/// `[batch * len, d]` positional encodings, repeated per window.
pub fn positional_table<T: Scalar>(len: usize, d: usize, batch: usize) -> Tensor<T> {
    let one: Vec<T> = (0..len).flat_map(|i| positional_encoding(i, d)).map(T::c).collect();
    let mut data = Vec::with_capacity(batch * one.len());
    for _ in 0..batch {
        data.extend_from_slice(&one);
    }
    Tensor::new(vec![batch * len, d], data).expect("consistent layout")
}
