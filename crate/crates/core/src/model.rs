//! The full generator: two feature streams, temporal encoder, fusion,
//! coarse projection, regressor and the differentiable joint path; plus
//! the motion discriminator's parameters.

use flowpose_tensor::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::body_model::{BodyTemplate, JointModel, SmplParams, NUM_BETAS, PARAM_DIM};
use crate::config::{EncoderKind, ModelConfig, RegressorKind};
use crate::datagen::FrameSequence;
use crate::discriminator::init_discriminator;
use crate::encoders::{extract_var, init_extractor, ToyBackbone};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::regressor::{decode, decode_var, hmr_regress_var, init_coarse, init_hmr, init_transformer_regressor, project_coarse_var, transformer_regress_var};
use crate::temporal_encoder::{gru_encoder_var, init_gru_encoder, init_transformer, transformer_var, AttentionRecord};

/// Discriminator weights live under this prefix; everything else belongs
/// to the generator.
pub const DISC_PREFIX: &str = "disc.";

pub fn is_generator_param(name: &str) -> bool {
    !name.starts_with(DISC_PREFIX)
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub template: BodyTemplate,
    joints: JointModel,
    rgb: ToyBackbone,
    flow: ToyBackbone,
}

/// Graph nodes of one generator forward pass over `B` sequences of `T`
/// frames; per-frame tensors are flattened to `N = B * T` rows.
pub struct Forward {
    /// `[B, T, 157]`
    pub raw: Var,
    /// `[N, K, 3, 3]`
    pub rotations: Var,
    /// `[N, 10]`
    pub betas: Var,
    /// `[N, 3]`, positive scale first.
    pub camera: Var,
    /// `[N, K, 3]`
    pub joints3d: Var,
    /// One `[B, h, T, T]` node per encoder layer (empty for the GRU).
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub params: Vec<SmplParams>,
    /// `[T, 157]`
    pub raw: Tensor,
    /// `[T, K, 3]`, metres.
    pub joints3d: Tensor,
    pub attention: Option<AttentionRecord>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, template: BodyTemplate) -> Self {
        let rgb = ToyBackbone::new(3, &cfg.backbone_channels, cfg.backbone_dim);
        let flow = ToyBackbone::new(2, &cfg.backbone_channels, cfg.backbone_dim);
        Self {
            cfg: cfg.clone(),
            joints: JointModel::new(&template),
            template,
            rgb,
            flow,
        }
    }

    /// Fresh weights for the generator and the discriminator. The two use
    /// separate random streams so changing one does not reshuffle the other.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &self.cfg;
        init_extractor(&mut store, &mut rng, "vcnn", &self.rgb, c.feature_dim);
        if c.flow_feature {
            init_extractor(&mut store, &mut rng, "ocnn", &self.flow, c.feature_dim);
        }
        match c.encoder {
            EncoderKind::Transformer => init_transformer(&mut store, &mut rng, "encoder", &c.transformer),
            EncoderKind::Gru => init_gru_encoder(&mut store, &mut rng, "gru", c.feature_dim, &c.gru),
        }
        init_coarse(&mut store, &mut rng, c.feature_dim);
        match c.regressor {
            RegressorKind::Transformer => init_transformer_regressor(&mut store, &mut rng, &c.regressor_transformer),
            RegressorKind::Hmr => init_hmr(&mut store, &mut rng, c.feature_dim, &c.hmr),
        }
        let mut drng = ChaCha8Rng::seed_from_u64(seed);
        drng.set_stream(1);
        init_discriminator(&mut store, &mut drng, self.template.num_joints(), &c.discriminator);
        store
    }

    /// `frames` `[B, T, H, W, 3]`, `flows` `[B, T, H, W, 2]` (ignored when
    /// the flow stream is off).
    pub fn forward(&self, g: &mut Graph, ctx: &mut Ctx, frames: &Tensor, flows: &Tensor) -> Result<Forward> {
        let s = frames.shape();
        if s.len() != 5 || s[4] != 3 {
            return Err(Error::shape("model", &[0, 0, 0, 0, 3], s));
        }
        let (b, t, h, w) = (s[0], s[1], s[2], s[3]);
        let n = b * t;
        let d = self.cfg.feature_dim;
        let x = g.constant(frames.reshaped(&[n, h, w, 3]));
        let f_v = extract_var(g, ctx, "vcnn", &self.rgb, x);
        let f_v = g.reshape(f_v, &[b, t, d]);
        let (g_v, attention) = match self.cfg.encoder {
            EncoderKind::Transformer => transformer_var(g, ctx, "encoder", &self.cfg.transformer, f_v)?,
            EncoderKind::Gru => (gru_encoder_var(g, ctx, "gru", &self.cfg.gru, f_v), Vec::new()),
        };
        let fused = if self.cfg.flow_feature {
            if flows.shape() != [b, t, h, w, 2] {
                return Err(Error::shape("model flows", &[b, t, h, w, 2], flows.shape()));
            }
            let o = g.constant(flows.reshaped(&[n, h, w, 2]));
            let f_o = extract_var(g, ctx, "ocnn", &self.flow, o);
            let f_o = g.reshape(f_o, &[b, t, d]);
            g.add(g_v, f_o)
        } else {
            g_v
        };
        let raw = match self.cfg.regressor {
            RegressorKind::Transformer => {
                let coarse = project_coarse_var(g, ctx, fused);
                transformer_regress_var(g, ctx, &self.cfg.regressor_transformer, coarse)?
            }
            RegressorKind::Hmr => hmr_regress_var(g, ctx, &self.cfg.hmr, fused),
        };
        let dec = decode_var(g, raw);
        let k = self.template.num_joints();
        let rotations = g.reshape(dec.rotations, &[n, k, 3, 3]);
        let betas = g.reshape(dec.betas, &[n, NUM_BETAS]);
        let camera = g.reshape(dec.camera, &[n, 3]);
        let joints3d = self.joints.joints(g, rotations, betas);
        Ok(Forward { raw, rotations, betas, camera, joints3d, attention })
    }

    /// Inference on one sequence.
    pub fn predict(&self, store: &ParamStore, seq: &FrameSequence, capture_attention: bool) -> Result<Prediction> {
        let (t, h, w) = (seq.len(), seq.height(), seq.width());
        let mut g = Graph::inference();
        let mut ctx = Ctx::eval(store);
        let frames = seq.frames.reshaped(&[1, t, h, w, 3]);
        let flows = seq.flows.reshaped(&[1, t, h, w, 2]);
        let out = self.forward(&mut g, &mut ctx, &frames, &flows)?;
        let raw = g.value(out.raw).reshaped(&[t, PARAM_DIM]);
        let attention = (capture_attention && !out.attention.is_empty()).then(|| {
            let layers: Vec<Tensor> = out.attention.iter().map(|&a| g.value(a).slice0(0)).collect();
            AttentionRecord { weights: Tensor::stack(&layers).expect("layers share a shape") }
        });
        Ok(Prediction {
            params: decode(&raw)?,
            joints3d: g.value(out.joints3d).clone(),
            raw,
            attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::forward;
    use crate::config::Config;
    use crate::datagen::{gen_sequence, GenConfig};
    use crate::regressor::mean_params;

    fn tiny() -> Config {
        let mut c = Config::desk();
        c.model.backbone_channels = vec![4, 4];
        c.model.backbone_dim = 8;
        c.model.feature_dim = 16;
        c.model.transformer.d_model = 16;
        c.model.transformer.ff_dim = 16;
        c.model.transformer.heads = 2;
        c.model.regressor_transformer.d_model = 16;
        c.model.regressor_transformer.ff_dim = 16;
        c.model.regressor_transformer.layers = 1;
        c.model.gru.hidden = 8;
        c.model.hmr.hidden = 16;
        c.model.discriminator = crate::discriminator::DiscriminatorConfig { layers: 1, hidden: 8, attention_dim: 8 };
        c
    }

    fn seq() -> FrameSequence {
        let cfg = GenConfig { seq_len: 4, height: 16, width: 16, ..GenConfig::default() };
        gen_sequence(&BodyTemplate::toy(), &cfg, 0, 3).unwrap()
    }

    #[test]
    fn every_variant_runs_and_gives_valid_output() {
        let s = seq();
        for enc in [EncoderKind::Transformer, EncoderKind::Gru] {
            for reg in [RegressorKind::Transformer, RegressorKind::Hmr] {
                for flow in [true, false] {
                    let mut c = tiny();
                    c.model.encoder = enc;
                    c.model.regressor = reg;
                    c.model.flow_feature = flow;
                    let m = Model::new(&c.model, BodyTemplate::toy());
                    let store = m.init(1);
                    assert_eq!(store.contains("ocnn.reduce.w"), flow);
                    let p = m.predict(&store, &s, true).unwrap();
                    assert_eq!(p.params.len(), 4);
                    assert_eq!(p.attention.is_some(), enc == EncoderKind::Transformer);
                    assert!(p.params.iter().all(|q| q.camera.scale > 0.0));
                    // graph joints agree with the plain body model
                    for (t, q) in p.params.iter().enumerate() {
                        let mesh = forward(&m.template, q).unwrap();
                        assert!(mesh.joints3d.max_abs_diff(&p.joints3d.slice0(t)) < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn initial_transformer_regressor_output_stays_near_the_mean() {
        let c = tiny();
        let m = Model::new(&c.model, BodyTemplate::toy());
        let store = m.init(2);
        let p = m.predict(&store, &seq(), false).unwrap();
        let mean = mean_params();
        for t in 0..4 {
            let dev: f64 = p.raw.row(t).iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(dev < 1.0, "frame {t} deviates by {dev}");
        }
    }

    #[test]
    fn init_is_deterministic_and_streams_are_separate() {
        let c = tiny();
        let m = Model::new(&c.model, BodyTemplate::toy());
        assert_eq!(m.init(5), m.init(5));
        let mut c2 = c.clone();
        c2.model.discriminator.hidden = 4;
        let m2 = Model::new(&c2.model, BodyTemplate::toy());
        let (a, b) = (m.init(5), m2.init(5));
        for (n, t) in a.iter().filter(|(n, _)| is_generator_param(n)) {
            assert_eq!(b.get(n), Some(t));
        }
    }
}
