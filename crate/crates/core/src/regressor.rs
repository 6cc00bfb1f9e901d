//! Stream fusion, the coarse parameter projection, and the two regressors
//! that turn features into per-frame body parameters.

use flowpose_tensor::{Graph, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body_model::{rot6d_to_matrix_var, Camera, Pose, SmplParams, NUM_BETAS, NUM_JOINTS, PARAM_DIM};
use crate::encoders::{FeatureSeq, Stream};
use crate::error::{Error, Result};
use crate::nn::{self, Ctx};
use crate::temporal_encoder::{transformer_var, TransformerConfig};

/// Mean camera scale used to initialise the regressors.
pub const MEAN_SCALE: f64 = 0.8;
pub const MEAN_TY: f64 = -0.12;

/// Parameter vector of the rest pose seen from the default camera: the root
/// is turned half a revolution about x so the body stands upright with image
/// y pointing down.
pub fn mean_params() -> Vec<f64> {
    let mut v = Vec::with_capacity(PARAM_DIM);
    v.extend([1.0, 0.0, 0.0, 0.0, -1.0, 0.0]);
    for _ in 1..NUM_JOINTS {
        v.extend([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }
    v.extend([0.0; NUM_BETAS]);
    v.extend([nn::inverse_softplus(MEAN_SCALE), 0.0, MEAN_TY]);
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmrConfig {
    pub hidden: usize,
    pub iterations: usize,
    pub dropout: f64,
}

impl Default for HmrConfig {
    fn default() -> Self {
        Self {
            hidden: 1024,
            iterations: 3,
            dropout: 0.5,
        }
    }
}

pub fn regressor_config_default() -> TransformerConfig {
    TransformerConfig {
        layers: 3,
        heads: 4,
        ..TransformerConfig::default()
    }
}

/// Elementwise sum of the temporal RGB features and the flow features.
pub fn fuse(g_v: &FeatureSeq, f_o: &FeatureSeq) -> Result<FeatureSeq> {
    if g_v.values.shape() != f_o.values.shape() {
        return Err(Error::shape("fuse", g_v.values.shape(), f_o.values.shape()));
    }
    Ok(FeatureSeq {
        values: g_v.values.zip_map(&f_o.values, |a, b| a + b),
        stream: Stream::Temporal,
    })
}

pub fn init_coarse(store: &mut ParamStore, rng: &mut ChaCha8Rng, feature_dim: usize) {
    nn::init_linear_scaled(store, rng, "coarse", feature_dim, PARAM_DIM, 0.1);
    store.insert("coarse.b", Tensor::from_vec(&[PARAM_DIM], mean_params()));
}

/// Per-frame affine map to the raw parameter vector.
pub fn project_coarse_var(g: &mut Graph, ctx: &Ctx, fused: Var) -> Var {
    nn::linear(g, ctx, "coarse", fused)
}

pub fn project_coarse(store: &ParamStore, fused: &Tensor) -> Tensor {
    let mut g = Graph::inference();
    let ctx = Ctx::eval(store);
    let x = g.constant(fused.clone());
    let y = project_coarse_var(&mut g, &ctx, x);
    g.value(y).clone()
}

pub fn init_transformer_regressor(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &TransformerConfig) {
    nn::init_linear(store, rng, "regressor.embed", PARAM_DIM, cfg.d_model, true);
    crate::temporal_encoder::init_transformer(store, rng, "regressor.tr", cfg);
    nn::init_zero_linear(store, "regressor.head", cfg.d_model, PARAM_DIM);
}

/// Residual refinement of coarse vectors `[B, T, 157]`.
pub fn transformer_regress_var(g: &mut Graph, ctx: &mut Ctx, cfg: &TransformerConfig, coarse: Var) -> Result<Var> {
    let e = nn::linear(g, ctx, "regressor.embed", coarse);
    let (h, _) = transformer_var(g, ctx, "regressor.tr", cfg, e)?;
    let r = nn::linear(g, ctx, "regressor.head", h);
    Ok(g.add(coarse, r))
}

pub fn init_hmr(store: &mut ParamStore, rng: &mut ChaCha8Rng, feature_dim: usize, cfg: &HmrConfig) {
    nn::init_linear(store, rng, "hmr.fc1", feature_dim + PARAM_DIM, cfg.hidden, true);
    nn::init_linear(store, rng, "hmr.fc2", cfg.hidden, cfg.hidden, true);
    nn::init_linear_scaled(store, rng, "hmr.dec", cfg.hidden, PARAM_DIM, 0.01);
}

/// Iterative error feedback from the mean parameters on `[B, T, d]`.
pub fn hmr_regress_var(g: &mut Graph, ctx: &mut Ctx, cfg: &HmrConfig, feature: Var) -> Var {
    let s = g.shape(feature).to_vec();
    let (b, t) = (s[0], s[1]);
    let mean = Tensor::from_vec(&[1, 1, PARAM_DIM], mean_params());
    let mean = Tensor::from_fn(&[b, t, PARAM_DIM], |i| mean.data()[i % PARAM_DIM]);
    let mut theta = g.constant(mean);
    for _ in 0..cfg.iterations {
        let x = g.concat(&[feature, theta], 2);
        let h = nn::linear(g, ctx, "hmr.fc1", x);
        let h = g.relu(h);
        let h = nn::dropout(g, ctx, h, cfg.dropout);
        let h = nn::linear(g, ctx, "hmr.fc2", h);
        let h = g.relu(h);
        let h = nn::dropout(g, ctx, h, cfg.dropout);
        let delta = nn::linear(g, ctx, "hmr.dec", h);
        theta = g.add(theta, delta);
    }
    theta
}

/// Final parameters split into their parts.
pub struct Decoded {
    /// `[B, T, 24, 3, 3]`
    pub rotations: Var,
    /// `[B, T, 10]`
    pub betas: Var,
    /// `[B, T, 3]`, positive scale.
    pub camera: Var,
}

pub fn decode_var(g: &mut Graph, params: Var) -> Decoded {
    let s = g.shape(params).to_vec();
    let (b, t) = (s[0], s[1]);
    let r6 = g.narrow(params, 2, 0, NUM_JOINTS * 6);
    let r6 = g.reshape(r6, &[b, t, NUM_JOINTS, 6]);
    let rotations = rot6d_to_matrix_var(g, r6);
    let betas = g.narrow(params, 2, NUM_JOINTS * 6, NUM_BETAS);
    let raw_s = g.narrow(params, 2, NUM_JOINTS * 6 + NUM_BETAS, 1);
    let scale = g.softplus(raw_s);
    let trans = g.narrow(params, 2, NUM_JOINTS * 6 + NUM_BETAS + 1, 2);
    let camera = g.concat(&[scale, trans], 2);
    Decoded { rotations, betas, camera }
}

/// Raw `[T, 157]` vectors to per-frame parameters; the camera scale goes
/// through softplus.
pub fn decode(raw: &Tensor) -> Result<Vec<SmplParams>> {
    let t = raw.shape()[0];
    (0..t)
        .map(|i| {
            let r = raw.row(i);
            let pose = Pose::Rot6d(r[..NUM_JOINTS * 6].chunks(6).map(|c| c.try_into().unwrap()).collect());
            let c = &r[NUM_JOINTS * 6 + NUM_BETAS..];
            let p = SmplParams {
                pose,
                shape: r[NUM_JOINTS * 6..NUM_JOINTS * 6 + NUM_BETAS].try_into().unwrap(),
                camera: Camera::new(softplus(c[0]), c[1], c[2]),
            };
            p.pose.rotations()?;
            Ok(p)
        })
        .collect()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Transformer regressor over one sequence's coarse vectors `[T, 157]`.
pub fn transformer_regress(store: &ParamStore, cfg: &TransformerConfig, coarse: &Tensor) -> Result<Vec<SmplParams>> {
    let t = coarse.shape()[0];
    let mut g = Graph::inference();
    let mut ctx = Ctx::eval(store);
    let x = g.constant(coarse.reshaped(&[1, t, PARAM_DIM]));
    let y = transformer_regress_var(&mut g, &mut ctx, cfg, x)?;
    decode(&g.value(y).reshaped(&[t, PARAM_DIM]))
}

/// Iterative regressor over one sequence's features `[T, d]`.
pub fn hmr_regress(store: &ParamStore, cfg: &HmrConfig, feature: &Tensor) -> Result<Vec<SmplParams>> {
    let (t, d) = (feature.shape()[0], feature.shape()[1]);
    let mut g = Graph::inference();
    let mut ctx = Ctx::eval(store);
    let x = g.constant(feature.reshaped(&[1, t, d]));
    let y = hmr_regress_var(&mut g, &mut ctx, cfg, x);
    decode(&g.value(y).reshaped(&[t, PARAM_DIM]))
}
