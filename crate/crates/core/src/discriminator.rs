//! Motion discriminator over rotation-matrix pose sequences and its
//! least-squares objectives.

use flowpose_tensor::{Graph, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body_model::rotation::axis_angle_tensor_to_matrices;
use crate::nn::{self, Ctx};
use crate::temporal_encoder::{gru_var, init_gru, GruConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub layers: usize,
    pub hidden: usize,
    pub attention_dim: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 1024,
            attention_dim: 1024,
        }
    }
}

impl DiscriminatorConfig {
    fn gru(&self) -> GruConfig {
        GruConfig {
            layers: self.layers,
            hidden: self.hidden,
        }
    }
}

pub fn init_discriminator(store: &mut ParamStore, rng: &mut ChaCha8Rng, joints: usize, cfg: &DiscriminatorConfig) {
    init_gru(store, rng, "disc.gru", joints * 9, &cfg.gru());
    nn::init_linear(store, rng, "disc.att", cfg.hidden, cfg.attention_dim, true);
    nn::init_linear(store, rng, "disc.att_v", cfg.attention_dim, 1, false);
    nn::init_linear(store, rng, "disc.out", cfg.hidden, 1, true);
}

/// Scores of `[B, T, K * 9]` rotation-matrix sequences, shape `[B]`.
pub fn dm_score_var(g: &mut Graph, ctx: &mut Ctx, cfg: &DiscriminatorConfig, poses: Var) -> Var {
    let s = g.shape(poses).to_vec();
    let (b, t) = (s[0], s[1]);
    let h = gru_var(g, ctx, "disc.gru", &cfg.gru(), poses);
    let e = nn::linear(g, ctx, "disc.att", h);
    let e = g.tanh(e);
    let e = nn::linear(g, ctx, "disc.att_v", e);
    let e = g.reshape(e, &[b, 1, t]);
    let a = g.softmax(e);
    let pooled = g.matmul(a, h);
    let pooled = g.reshape(pooled, &[b, cfg.hidden]);
    let score = nn::linear(g, ctx, "disc.out", pooled);
    g.reshape(score, &[b])
}

/// Score one sequence given either `[T, K * 3]` axis-angle or
/// `[T, K * 9]` rotation matrices.
pub fn dm_score(store: &ParamStore, cfg: &DiscriminatorConfig, poses: &Tensor) -> f64 {
    let t = poses.shape()[0];
    let mats = if poses.shape()[1] % 9 == 0 && store.get("disc.gru.l0.w_ih").map(|w| w.shape()[0]) == Some(poses.shape()[1]) {
        poses.clone()
    } else {
        let k = poses.shape()[1] / 3;
        axis_angle_tensor_to_matrices(&poses.reshaped(&[t, k, 3])).reshaped(&[t, k * 9])
    };
    let k9 = mats.shape()[1];
    let mut g = Graph::inference();
    let mut ctx = Ctx::eval(store);
    let x = g.constant(mats.reshaped(&[1, t, k9]));
    let s = dm_score_var(&mut g, &mut ctx, cfg, x);
    g.value(s).data()[0]
}

/// `mean((s - 1)²)` over fake scores.
pub fn adv_gen_loss_var(g: &mut Graph, fake: Var) -> Var {
    let d = g.add_scalar(fake, -1.0);
    let sq = g.square(d);
    g.mean(sq)
}

/// `mean((real - 1)²) + mean(fake²)`.
pub fn disc_loss_var(g: &mut Graph, real: Var, fake: Var) -> Var {
    let r = g.add_scalar(real, -1.0);
    let r = g.square(r);
    let r = g.mean(r);
    let f = g.square(fake);
    let f = g.mean(f);
    g.add(r, f)
}

pub fn adv_gen_loss(fake: &[f64]) -> f64 {
    fake.iter().map(|s| (s - 1.0).powi(2)).sum::<f64>() / fake.len() as f64
}

pub fn disc_loss(real: &[f64], fake: &[f64]) -> f64 {
    real.iter().map(|s| (s - 1.0).powi(2)).sum::<f64>() / real.len() as f64
        + fake.iter().map(|s| s * s).sum::<f64>() / fake.len() as f64
}
