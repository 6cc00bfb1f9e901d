//! Transformer temporal encoder and the recurrent baseline.

use flowpose_tensor::{Graph, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureSeq, Stream};
use crate::error::{Error, Result};
use crate::nn::{self, Ctx};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 8,
            d_model: 512,
            ff_dim: 2048,
            dropout: 0.1,
            max_len: 128,
        }
    }
}

impl TransformerConfig {
    pub fn key_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Attention maps of one sequence, `[layers, heads, T, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub weights: Tensor,
}

impl AttentionRecord {
    pub fn layers(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[T, T]` map of one layer and head.
    pub fn map(&self, layer: usize, head: usize) -> Tensor {
        self.weights.slice0(layer).slice0(head)
    }
}

/// Per-head bias-free projections of `x` `[T, d_model]`, each returned as
/// `heads` matrices of `[T, d_model / heads]`.
pub fn qkv_project(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, heads: usize) -> (Vec<Tensor>, Vec<Tensor>, Vec<Tensor>) {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let split = |g: &mut Graph, w: &Tensor| -> Vec<Tensor> {
        let w = g.constant(w.clone());
        let y = g.matmul(xv, w);
        let (t, d) = (g.shape(y)[0], g.shape(y)[1]);
        let dk = d / heads;
        (0..heads).map(|h| {
            let s = g.narrow(y, 1, h * dk, dk);
            g.value(s).reshaped(&[t, dk])
        }).collect()
    };
    (split(&mut g, wq), split(&mut g, wk), split(&mut g, wv))
}

/// `softmax(Q Kᵀ / sqrt(d)) V` for one head; returns the output and weights.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::inference();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let (out, w) = attention_var(&mut g, q, k, v);
    (g.value(out).clone(), g.value(w).clone())
}

/// Scaled dot-product attention over the last two axes.
pub fn attention_var(g: &mut Graph, q: Var, k: Var, v: Var) -> (Var, Var) {
    let d = *g.shape(k).last().unwrap();
    let logits = g.matmul_t(q, k, false, true);
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let weights = g.softmax(logits);
    (g.matmul(weights, v), weights)
}

pub fn init_transformer(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &TransformerConfig) {
    let d = cfg.d_model;
    for l in 0..cfg.layers {
        let p = format!("{prefix}.layer{l}");
        nn::init_layer_norm(store, &format!("{p}.ln1"), d);
        for m in ["q", "k", "v"] {
            nn::init_linear(store, rng, &format!("{p}.attn.{m}"), d, d, false);
        }
        nn::init_linear(store, rng, &format!("{p}.attn.o"), d, d, true);
        nn::init_layer_norm(store, &format!("{p}.ln2"), d);
        nn::init_linear(store, rng, &format!("{p}.ff1"), d, cfg.ff_dim, true);
        nn::init_linear(store, rng, &format!("{p}.ff2"), cfg.ff_dim, d, true);
    }
}

fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let r = g.reshape(x, &[b, t, heads, d / heads]);
    g.permute(r, &[0, 2, 1, 3])
}

/// Multi-head self-attention on `[B, T, d]`; also returns `[B, h, T, T]`.
pub fn self_attention_var(g: &mut Graph, ctx: &mut Ctx, prefix: &str, x: Var, heads: usize) -> (Var, Var) {
    let s = g.shape(x).to_vec();
    let q = nn::linear(g, ctx, &format!("{prefix}.q"), x);
    let k = nn::linear(g, ctx, &format!("{prefix}.k"), x);
    let v = nn::linear(g, ctx, &format!("{prefix}.v"), x);
    let (q, k, v) = (split_heads(g, q, heads), split_heads(g, k, heads), split_heads(g, v, heads));
    let (o, w) = attention_var(g, q, k, v);
    let o = g.permute(o, &[0, 2, 1, 3]);
    let o = g.reshape(o, &s);
    (nn::linear(g, ctx, &format!("{prefix}.o"), o), w)
}

/// One pre-norm layer: attention then feed-forward, each residual.
pub fn encoder_layer_var(g: &mut Graph, ctx: &mut Ctx, prefix: &str, cfg: &TransformerConfig, x: Var) -> (Var, Var) {
    let h = nn::layer_norm(g, ctx, &format!("{prefix}.ln1"), x);
    let (a, w) = self_attention_var(g, ctx, &format!("{prefix}.attn"), h, cfg.heads);
    let a = nn::dropout(g, ctx, a, cfg.dropout);
    let x = g.add(x, a);
    let h = nn::layer_norm(g, ctx, &format!("{prefix}.ln2"), x);
    let h = nn::linear(g, ctx, &format!("{prefix}.ff1"), h);
    let h = g.relu(h);
    let h = nn::dropout(g, ctx, h, cfg.dropout);
    let h = nn::linear(g, ctx, &format!("{prefix}.ff2"), h);
    let h = nn::dropout(g, ctx, h, cfg.dropout);
    (g.add(x, h), w)
}

/// Positional encoding plus the layer stack on `[B, T, d]`. Returns the
/// encoded sequence and one `[B, h, T, T]` attention node per layer.
pub fn transformer_var(g: &mut Graph, ctx: &mut Ctx, prefix: &str, cfg: &TransformerConfig, x: Var) -> Result<(Var, Vec<Var>)> {
    let s = g.shape(x).to_vec();
    let (t, d) = (s[1], s[2]);
    if t > cfg.max_len {
        return Err(Error::LengthOverflow { got: t, max: cfg.max_len });
    }
    if d != cfg.d_model {
        return Err(Error::shape("transformer", &[s[0], t, cfg.d_model], &s));
    }
    let pe = g.constant(nn::sinusoidal_encoding(t, d));
    let mut x = g.add(x, pe);
    let mut maps = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let (y, w) = encoder_layer_var(g, ctx, &format!("{prefix}.layer{l}"), cfg, x);
        x = y;
        maps.push(w);
    }
    Ok((x, maps))
}

/// Encode one RGB feature sequence with weights under `encoder`.
pub fn encode(store: &ParamStore, cfg: &TransformerConfig, f_v: &FeatureSeq, capture_attention: bool) -> Result<(FeatureSeq, Option<AttentionRecord>)> {
    let (t, d) = (f_v.len(), f_v.dim());
    let mut g = Graph::inference();
    let mut ctx = Ctx::eval(store);
    let x = g.constant(f_v.values.reshaped(&[1, t, d]));
    let (y, maps) = transformer_var(&mut g, &mut ctx, "encoder", cfg, x)?;
    let record = capture_attention.then(|| {
        let per_layer: Vec<Tensor> = maps.iter().map(|&m| g.value(m).slice0(0)).collect();
        let weights = if per_layer.is_empty() {
            Tensor::zeros(&[0, cfg.heads, t, t])
        } else {
            Tensor::stack(&per_layer).expect("layers share a shape")
        };
        AttentionRecord { weights }
    });
    let values = g.value(y).reshaped(&[t, d]);
    Ok((FeatureSeq { values, stream: Stream::Temporal }, record))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruConfig {
    pub layers: usize,
    pub hidden: usize,
}

impl Default for GruConfig {
    fn default() -> Self {
        Self { layers: 2, hidden: 1024 }
    }
}

/// Gate order in the packed weights is reset, update, candidate.
pub fn init_gru(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, in_dim: usize, cfg: &GruConfig) {
    use rand_distr::{Distribution, Uniform};
    let a = 1.0 / (cfg.hidden as f64).sqrt();
    let u = Uniform::new_inclusive(-a, a).unwrap();
    let mut input = in_dim;
    for l in 0..cfg.layers {
        let p = format!("{prefix}.l{l}");
        store.insert(format!("{p}.w_ih"), Tensor::from_fn(&[input, 3 * cfg.hidden], |_| u.sample(rng)));
        store.insert(format!("{p}.w_hh"), Tensor::from_fn(&[cfg.hidden, 3 * cfg.hidden], |_| u.sample(rng)));
        store.insert(format!("{p}.b_ih"), Tensor::from_fn(&[3 * cfg.hidden], |_| u.sample(rng)));
        store.insert(format!("{p}.b_hh"), Tensor::from_fn(&[3 * cfg.hidden], |_| u.sample(rng)));
        input = cfg.hidden;
    }
}

/// Stacked unidirectional GRU on `[B, T, in]`, zero initial state.
/// Returns the top layer's states `[B, T, hidden]`.
pub fn gru_var(g: &mut Graph, ctx: &mut Ctx, prefix: &str, cfg: &GruConfig, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let (b, t) = (s[0], s[1]);
    let hd = cfg.hidden;
    let mut seq = x;
    for l in 0..cfg.layers {
        let p = format!("{prefix}.l{l}");
        let w_ih = ctx.param(g, &format!("{p}.w_ih"));
        let w_hh = ctx.param(g, &format!("{p}.w_hh"));
        let b_ih = ctx.param(g, &format!("{p}.b_ih"));
        let b_hh = ctx.param(g, &format!("{p}.b_hh"));
        let gi_all = g.linear(seq, w_ih, Some(b_ih));
        let mut h = g.constant(Tensor::zeros(&[b, hd]));
        let mut states = Vec::with_capacity(t);
        for step in 0..t {
            let gi = g.narrow(gi_all, 1, step, 1);
            let gi = g.reshape(gi, &[b, 3 * hd]);
            let gh = g.linear(h, w_hh, Some(b_hh));
            let (ir, iz, inn) = (g.narrow(gi, 1, 0, hd), g.narrow(gi, 1, hd, hd), g.narrow(gi, 1, 2 * hd, hd));
            let (hr, hz, hn) = (g.narrow(gh, 1, 0, hd), g.narrow(gh, 1, hd, hd), g.narrow(gh, 1, 2 * hd, hd));
            let r = g.add(ir, hr);
            let r = g.sigmoid(r);
            let z = g.add(iz, hz);
            let z = g.sigmoid(z);
            let rn = g.mul(r, hn);
            let n = g.add(inn, rn);
            let n = g.tanh(n);
            // h' = n + z * (h - n)
            let diff = g.sub(h, n);
            let zd = g.mul(z, diff);
            h = g.add(n, zd);
            states.push(g.reshape(h, &[b, 1, hd]));
        }
        seq = g.concat(&states, 1);
    }
    seq
}

/// Recurrent encoder followed by `{prefix}.out` back to the feature width.
pub fn gru_encoder_var(g: &mut Graph, ctx: &mut Ctx, prefix: &str, cfg: &GruConfig, x: Var) -> Var {
    let h = gru_var(g, ctx, prefix, cfg, x);
    nn::linear(g, ctx, &format!("{prefix}.out"), h)
}

pub fn init_gru_encoder(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize, cfg: &GruConfig) {
    init_gru(store, rng, prefix, dim, cfg);
    nn::init_linear(store, rng, &format!("{prefix}.out"), cfg.hidden, dim, true);
}

/// Recurrent alternative to [`encode`], weights under `gru`.
pub fn gru_encode(store: &ParamStore, cfg: &GruConfig, f_v: &FeatureSeq) -> FeatureSeq {
    let (t, d) = (f_v.len(), f_v.dim());
    let mut g = Graph::inference();
    let mut ctx = Ctx::eval(store);
    let x = g.constant(f_v.values.reshaped(&[1, t, d]));
    let y = gru_encoder_var(&mut g, &mut ctx, "gru", cfg, x);
    FeatureSeq {
        values: g.value(y).reshaped(&[t, d]),
        stream: Stream::Temporal,
    }
}
