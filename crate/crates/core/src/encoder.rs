//! Learnable space-time positional encoding and the pre-norm Transformer
//! encoder over all `N = T * P` tokens jointly.
//!
//! Each layer computes
//!
//! ```text
//! U  = Z + MHA(LN(Z))
//! Z' = U + MLP(LN(U))
//! ```
//!
//! with `MHA(Z) = concat_h(softmax(Q_h K_h^T / sqrt(d_h)) V_h) W_o` and
//! per-head projections `W_{Q,K,V}^h` of shape `C x d_h`. There is no final
//! LayerNorm after the last layer.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{inv_sqrt, Tape, Var};
use crate::backbone::TokenGrid;
use crate::error::{dim_err, Error, Result};
use crate::params::{Init, ParamStore};
use crate::rng::Rng;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Number of layers; 0 bypasses the encoder.
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub activation: Activation,
    /// Dropout on the attention and MLP branch outputs during training.
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub positional_encoding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            activation: Activation::Gelu,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
            positional_encoding: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, model_dim: usize) -> Result<()> {
        if self.heads == 0 || !model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model dim {model_dim} not divisible into {} heads",
                self.heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("ffn_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.layer_norm_eps >= 0.0) {
            return Err(Error::Config("layer_norm_eps must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self, model_dim: usize) -> usize {
        model_dim / self.heads
    }
}

/// One learnable embedding per `(t, p)` site, stored as `[T, P, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding<S> {
    pub table: Tensor<S>,
}

impl<S: Scalar> PositionalEncoding<S> {
    pub fn new(table: Tensor<S>) -> Result<Self> {
        if table.shape().len() != 3 {
            return dim_err("positional_encoding", format!("expected [T, P, C], got {:?}", table.shape()));
        }
        Ok(Self { table })
    }

    pub fn zeros(t: usize, p: usize, c: usize) -> Result<Self> {
        Self::new(Tensor::zeros(vec![t, p, c])?)
    }

    fn check(&self, t: usize, p: usize, c: usize) -> Result<()> {
        if self.table.shape() != [t, p, c] {
            return dim_err(
                "add_positional_encoding",
                format!("table {:?} for grid [{t}, {p}, {c}]", self.table.shape()),
            );
        }
        Ok(())
    }
}

/// `z_{t,p} = x_{t,p} + e_{t,p}`.
pub fn add_positional_encoding<S: Scalar>(grid: &TokenGrid<S>, pe: &PositionalEncoding<S>) -> Result<TokenGrid<S>> {
    pe.check(grid.t_frames, grid.sites(), grid.channels)?;
    let data = grid
        .features
        .data()
        .iter()
        .zip(pe.table.data())
        .map(|(&x, &e)| x + e)
        .collect();
    TokenGrid::new(Tensor::new(grid.features.shape().to_vec(), data)?)
}

/// Weights of one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams<S> {
    pub wq: Vec<Tensor<S>>,
    pub wk: Vec<Tensor<S>>,
    pub wv: Vec<Tensor<S>>,
    pub wo: Tensor<S>,
    pub ln1_gain: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    pub ln2_gain: Tensor<S>,
    pub ln2_bias: Tensor<S>,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

/// `(suffix, shape, init)` for every tensor of a layer, in storage order.
pub fn layer_param_specs(model_dim: usize, cfg: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let c = model_dim;
    let dh = cfg.head_dim(c);
    let f = cfg.ffn_dim;
    let mut specs = vec![
        ("ln1.gain".to_string(), vec![c], Init::Ones),
        ("ln1.bias".to_string(), vec![c], Init::Zeros),
    ];
    for proj in ["wq", "wk", "wv"] {
        for h in 0..cfg.heads {
            specs.push((format!("{proj}.h{h}"), vec![c, dh], Init::FanInUniform { fan_in: c }));
        }
    }
    specs.extend([
        ("wo".to_string(), vec![c, c], Init::FanInUniform { fan_in: c }),
        ("ln2.gain".to_string(), vec![c], Init::Ones),
        ("ln2.bias".to_string(), vec![c], Init::Zeros),
        ("mlp.w1".to_string(), vec![c, f], Init::FanInUniform { fan_in: c }),
        ("mlp.b1".to_string(), vec![f], Init::Zeros),
        ("mlp.w2".to_string(), vec![f, c], Init::FanInUniform { fan_in: f }),
        ("mlp.b2".to_string(), vec![c], Init::Zeros),
    ]);
    specs
}

impl<S: Scalar> EncoderLayerParams<S> {
    pub fn init(model_dim: usize, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, shape, init) in layer_param_specs(model_dim, cfg) {
            store.insert(name, init.sample(shape, rng)?)?;
        }
        Self::from_store(&store, "", cfg)
    }

    /// Reads a layer whose tensors are stored under `prefix`.
    pub fn from_store(store: &ParamStore<S>, prefix: &str, cfg: &EncoderConfig) -> Result<Self> {
        let get = |s: &str| store.get(&format!("{prefix}{s}")).cloned();
        let heads = |proj: &str| (0..cfg.heads).map(|h| get(&format!("{proj}.h{h}"))).collect::<Result<Vec<_>>>();
        Ok(Self {
            wq: heads("wq")?,
            wk: heads("wk")?,
            wv: heads("wv")?,
            wo: get("wo")?,
            ln1_gain: get("ln1.gain")?,
            ln1_bias: get("ln1.bias")?,
            ln2_gain: get("ln2.gain")?,
            ln2_bias: get("ln2.bias")?,
            w1: get("mlp.w1")?,
            b1: get("mlp.b1")?,
            w2: get("mlp.w2")?,
            b2: get("mlp.b2")?,
        })
    }

    pub fn record(&self, tape: &mut Tape<S>) -> LayerVars {
        LayerVars {
            wq: self.wq.iter().map(|t| tape.leaf(t)).collect(),
            wk: self.wk.iter().map(|t| tape.leaf(t)).collect(),
            wv: self.wv.iter().map(|t| tape.leaf(t)).collect(),
            wo: tape.leaf(&self.wo),
            ln1_gain: tape.leaf(&self.ln1_gain),
            ln1_bias: tape.leaf(&self.ln1_bias),
            ln2_gain: tape.leaf(&self.ln2_gain),
            ln2_bias: tape.leaf(&self.ln2_bias),
            w1: tape.leaf(&self.w1),
            b1: tape.leaf(&self.b1),
            w2: tape.leaf(&self.w2),
            b2: tape.leaf(&self.b2),
        }
    }
}

/// Tape handles for one layer's weights.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl LayerVars {
    /// Resolves a layer stored under `prefix` from vars aligned with `store`.
    pub fn from_store<S: Scalar>(store: &ParamStore<S>, vars: &[Var], prefix: &str, heads: usize) -> Result<Self> {
        let get = |s: &str| -> Result<Var> {
            let name = format!("{prefix}{s}");
            store
                .position(&name)
                .map(|i| vars[i])
                .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
        };
        let per_head = |proj: &str| (0..heads).map(|h| get(&format!("{proj}.h{h}"))).collect::<Result<Vec<_>>>();
        Ok(Self {
            wq: per_head("wq")?,
            wk: per_head("wk")?,
            wv: per_head("wv")?,
            wo: get("wo")?,
            ln1_gain: get("ln1.gain")?,
            ln1_bias: get("ln1.bias")?,
            ln2_gain: get("ln2.gain")?,
            ln2_bias: get("ln2.bias")?,
            w1: get("mlp.w1")?,
            b1: get("mlp.b1")?,
            w2: get("mlp.w2")?,
            b2: get("mlp.b2")?,
        })
    }
}

/// How the per-head projections are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    /// One `C x d_h` matmul per head and projection.
    PerHead,
    /// Heads concatenated into one `C x C` matmul, then split by columns.
    Fused,
}

/// Inverted dropout applied to branch outputs while training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

impl Dropout<'_> {
    fn apply<S: Scalar>(&mut self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep: S = lit(1.0 / (1.0 - self.rate));
        let n = tape.value(x).len();
        let mask = (0..n)
            .map(|_| if self.rng.gen::<f64>() < self.rate { S::zero() } else { keep })
            .collect();
        tape.mask(x, mask)
    }
}

fn project_heads<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    weights: &[Var],
    mode: Projection,
) -> Result<Vec<Var>> {
    match mode {
        Projection::PerHead => weights.iter().map(|&w| tape.matmul(x, w)).collect(),
        Projection::Fused => {
            let fused = tape.concat_cols(weights)?;
            let all = tape.matmul(x, fused)?;
            let mut start = 0;
            let mut out = Vec::with_capacity(weights.len());
            for &w in weights {
                let width = tape.shape(w)[1];
                out.push(tape.slice_cols(all, start, width)?);
                start += width;
            }
            Ok(out)
        }
    }
}

/// Multi-head self-attention; also returns each head's attention matrix.
pub fn mha_on<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    p: &LayerVars,
    mode: Projection,
) -> Result<(Var, Vec<Var>)> {
    let q = project_heads(tape, x, &p.wq, mode)?;
    let k = project_heads(tape, x, &p.wk, mode)?;
    let v = project_heads(tape, x, &p.wv, mode)?;
    let mut outs = Vec::with_capacity(q.len());
    let mut maps = Vec::with_capacity(q.len());
    for h in 0..q.len() {
        let dh = tape.shape(q[h])[1];
        let qs = tape.scale(q[h], inv_sqrt(dh));
        let scores = tape.matmul_nt(qs, k[h])?;
        let attn = tape.softmax(scores);
        outs.push(tape.matmul(attn, v[h])?);
        maps.push(attn);
    }
    let cat = tape.concat_cols(&outs)?;
    Ok((tape.matmul(cat, p.wo)?, maps))
}

pub fn mlp_on<S: Scalar>(tape: &mut Tape<S>, x: Var, p: &LayerVars, act: Activation) -> Result<Var> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add_row(h, p.b1)?;
    let h = match act {
        Activation::Gelu => tape.gelu(h),
        Activation::Relu => tape.relu(h),
    };
    let o = tape.matmul(h, p.w2)?;
    tape.add_row(o, p.b2)
}

pub fn encoder_layer_on<S: Scalar>(
    tape: &mut Tape<S>,
    z: Var,
    p: &LayerVars,
    cfg: &EncoderConfig,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let eps: S = lit(cfg.layer_norm_eps);
    let n1 = tape.layer_norm(z, p.ln1_gain, p.ln1_bias, eps)?;
    let (attn, _) = mha_on(tape, n1, p, Projection::Fused)?;
    let attn = match dropout.as_deref_mut() {
        Some(d) => d.apply(tape, attn)?,
        None => attn,
    };
    let u = tape.add(z, attn)?;
    let n2 = tape.layer_norm(u, p.ln2_gain, p.ln2_bias, eps)?;
    let m = mlp_on(tape, n2, p, cfg.activation)?;
    let m = match dropout {
        Some(d) => d.apply(tape, m)?,
        None => m,
    };
    tape.add(u, m)
}

fn check_tokens<S: Scalar>(tokens: &Tensor<S>, p: &EncoderLayerParams<S>) -> Result<()> {
    let c = p.wo.shape()[0];
    match tokens.shape() {
        [n, cc] if *n >= 1 && *cc == c => Ok(()),
        s => dim_err("encoder", format!("expected [N, {c}] tokens, got {s:?}")),
    }
}

pub fn multi_head_attention<S: Scalar>(
    tokens: &Tensor<S>,
    params: &EncoderLayerParams<S>,
    mode: Projection,
) -> Result<Tensor<S>> {
    check_tokens(tokens, params)?;
    let mut tape = Tape::new();
    let x = tape.leaf(tokens);
    let vars = params.record(&mut tape);
    let (out, _) = mha_on(&mut tape, x, &vars, mode)?;
    Ok(tape.tensor(out))
}

/// Per-head `N x N` attention matrices of `tokens` (no LayerNorm applied).
pub fn attention_maps<S: Scalar>(tokens: &Tensor<S>, params: &EncoderLayerParams<S>) -> Result<Vec<Tensor<S>>> {
    check_tokens(tokens, params)?;
    let mut tape = Tape::new();
    let x = tape.leaf(tokens);
    let vars = params.record(&mut tape);
    let (_, maps) = mha_on(&mut tape, x, &vars, Projection::PerHead)?;
    Ok(maps.into_iter().map(|m| tape.tensor(m)).collect())
}

pub fn mlp<S: Scalar>(tokens: &Tensor<S>, params: &EncoderLayerParams<S>, act: Activation) -> Result<Tensor<S>> {
    check_tokens(tokens, params)?;
    let mut tape = Tape::new();
    let x = tape.leaf(tokens);
    let vars = params.record(&mut tape);
    let out = mlp_on(&mut tape, x, &vars, act)?;
    Ok(tape.tensor(out))
}

pub fn encoder_layer<S: Scalar>(
    tokens: &Tensor<S>,
    params: &EncoderLayerParams<S>,
    cfg: &EncoderConfig,
) -> Result<Tensor<S>> {
    check_tokens(tokens, params)?;
    let mut tape = Tape::new();
    let x = tape.leaf(tokens);
    let vars = params.record(&mut tape);
    let out = encoder_layer_on(&mut tape, x, &vars, cfg, None)?;
    Ok(tape.tensor(out))
}

/// Flatten, add the positional table (if any), run every layer, reshape back.
pub fn encode<S: Scalar>(
    grid: &TokenGrid<S>,
    pe: Option<&PositionalEncoding<S>>,
    layers: &[EncoderLayerParams<S>],
    cfg: &EncoderConfig,
) -> Result<TokenGrid<S>> {
    let grid = match pe {
        Some(pe) => add_positional_encoding(grid, pe)?,
        None => grid.clone(),
    };
    let mut tokens = grid.tokens();
    for layer in layers {
        tokens = encoder_layer(&tokens, layer, cfg)?;
    }
    TokenGrid::from_tokens(&tokens, grid.t_frames, grid.h_cells, grid.w_cells)
}
