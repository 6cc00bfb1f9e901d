//! Per-frame feature extractors for the RGB and flow streams.

use flowpose_tensor::{Graph, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{self, Ctx};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Rgb,
    Flow,
    Temporal,
}

/// `T × D` features of one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSeq {
    pub values: Tensor,
    pub stream: Stream,
}

impl FeatureSeq {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Image-to-vector feature extractor operating on NHWC batches.
pub trait Backbone: Send + Sync {
    fn in_channels(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str);
    /// `[N, H, W, C]` to `[N, out_dim]`.
    fn forward(&self, g: &mut Graph, ctx: &mut Ctx, prefix: &str, images: Var) -> Var;
}

/// Stride-2 3×3 convolutions with ReLU, global average pooling and a
/// linear layer. Each input channel is fed alongside copies weighted by the
/// normalised pixel coordinates, so pooled features keep position.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyBackbone {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub out_dim: usize,
}

impl ToyBackbone {
    pub fn new(in_channels: usize, channels: &[usize], out_dim: usize) -> Self {
        Self {
            in_channels,
            channels: channels.to_vec(),
            out_dim,
        }
    }

    fn widened(&self) -> usize {
        self.in_channels * 3
    }

    /// `[1, H, W, 2]` grid of `(x, y)` in `[-1, 1]`.
    fn coord_grid(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[1, h, w, 2], |i| {
            let (p, c) = (i / 2, i % 2);
            let (x, y) = (p % w, p / w);
            if c == 0 {
                (2 * x + 1) as f64 / w as f64 - 1.0
            } else {
                (2 * y + 1) as f64 / h as f64 - 1.0
            }
        })
    }

    /// Concatenate `[I, I·x, I·y]` along channels.
    pub fn augment(g: &mut Graph, images: Var) -> Var {
        let s = g.shape(images).to_vec();
        let (h, w) = (s[1], s[2]);
        let grid = Self::coord_grid(h, w);
        let gx = g.constant(Tensor::from_fn(&[1, h, w, 1], |i| grid.data()[2 * i]));
        let gy = g.constant(Tensor::from_fn(&[1, h, w, 1], |i| grid.data()[2 * i + 1]));
        let ix = g.mul(images, gx);
        let iy = g.mul(images, gy);
        g.concat(&[images, ix, iy], 3)
    }
}

impl Backbone for ToyBackbone {
    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str) {
        use rand_distr::{Distribution, Normal};
        let mut cin = self.widened();
        for (i, &cout) in self.channels.iter().enumerate() {
            let n = Normal::new(0.0, (2.0 / (9 * cin) as f64).sqrt()).unwrap();
            store.insert(format!("{prefix}.conv{i}.w"), Tensor::from_fn(&[3, 3, cin, cout], |_| n.sample(rng)));
            store.insert(format!("{prefix}.conv{i}.b"), Tensor::zeros(&[cout]));
            cin = cout;
        }
        nn::init_linear_he(store, rng, &format!("{prefix}.fc"), cin, self.out_dim);
    }

    fn forward(&self, g: &mut Graph, ctx: &mut Ctx, prefix: &str, images: Var) -> Var {
        assert_eq!(g.shape(images)[3], self.in_channels, "backbone channel mismatch");
        let mut x = Self::augment(g, images);
        for i in 0..self.channels.len() {
            let w = ctx.param(g, &format!("{prefix}.conv{i}.w"));
            let b = ctx.param(g, &format!("{prefix}.conv{i}.b"));
            let y = g.conv2d(x, w, b, 2, 1);
            x = g.relu(y);
        }
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0], s[1] * s[2], s[3]]);
        let pooled = g.mean_axis(flat, 1);
        nn::linear(g, ctx, &format!("{prefix}.fc"), pooled)
    }
}

/// Backbone followed by the per-stream reduction layer `{prefix}.reduce`.
pub fn init_extractor(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    backbone: &dyn Backbone,
    feature_dim: usize,
) {
    backbone.init(store, rng, &format!("{prefix}.backbone"));
    nn::init_linear(store, rng, &format!("{prefix}.reduce"), backbone.out_dim(), feature_dim, true);
}

/// Graph form of the extractors: `[N, H, W, C]` to `[N, feature_dim]`.
pub fn extract_var(g: &mut Graph, ctx: &mut Ctx, prefix: &str, backbone: &dyn Backbone, images: Var) -> Var {
    let f = backbone.forward(g, ctx, &format!("{prefix}.backbone"), images);
    nn::linear(g, ctx, &format!("{prefix}.reduce"), f)
}

fn extract(store: &ParamStore, prefix: &str, backbone: &dyn Backbone, input: &Tensor, channels: usize, stream: Stream) -> Result<FeatureSeq> {
    let s = input.shape();
    if s.len() != 4 || s[3] != channels || backbone.in_channels() != channels {
        return Err(Error::shape("extract", &[0, 0, 0, channels], s));
    }
    let mut g = Graph::inference();
    let mut ctx = Ctx::eval(store);
    let x = g.constant(input.clone());
    let f = extract_var(&mut g, &mut ctx, prefix, backbone, x);
    Ok(FeatureSeq {
        values: g.value(f).clone(),
        stream,
    })
}

/// RGB frames `[T, H, W, 3]` to appearance features.
pub fn vcnn_extract(store: &ParamStore, backbone: &dyn Backbone, frames: &Tensor) -> Result<FeatureSeq> {
    extract(store, "vcnn", backbone, frames, 3, Stream::Rgb)
}

/// Flow fields `[T, H, W, 2]` to motion features.
pub fn ocnn_extract(store: &ParamStore, backbone: &dyn Backbone, flows: &Tensor) -> Result<FeatureSeq> {
    extract(store, "ocnn", backbone, flows, 2, Stream::Flow)
}

/// Replace the weights under `prefix` with those in `external`, which must
/// cover every parameter there with matching shapes.
pub fn import_weights(store: &mut ParamStore, prefix: &str, external: &ParamStore) -> Result<usize> {
    let names: Vec<String> = store.with_prefix(prefix).map(|(n, _)| n.clone()).collect();
    for n in &names {
        let w = external
            .get(n)
            .ok_or_else(|| Error::Config(format!("imported weights lack `{n}`")))?;
        store
            .assign(n, w.clone())
            .map_err(|e| Error::Config(format!("imported `{n}`: {e}")))?;
    }
    Ok(names.len())
}
