//! Two-phase training, evaluation, the ablation matrix and attention dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use flowpose_tensor::{clip_global_norm, Adam, Graph, ParamStore, Tensor, Var};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body_model::rotation::axis_angle_tensor_to_matrices;
use crate::body_model::{forward, project_var, BodyTemplate, SmplParams, NUM_BETAS};
use crate::checkpoint::{Checkpoint, Phase};
use crate::config::{Config, EncoderKind, RegressorKind};
use crate::container::{self, NamedArray};
use crate::datagen::{FrameSequence, PosePool};
use crate::discriminator::{adv_gen_loss_var, disc_loss_var, dm_score_var};
use crate::error::{Error, Result};
use crate::losses::{loss_2d_var, loss_3d_var, loss_flow_var, loss_smpl_var, total_loss_var};
use crate::metrics::{self, attention_summary, MM_PER_M};
use crate::model::{is_generator_param, Model};
use crate::nn::Ctx;
use crate::temporal_encoder::AttentionRecord;

/// Loss values of one optimisation step. `adv` and `disc` are zero in the
/// refinement phase, `flow` is zero in the adversarial phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub total: f64,
    pub l3d: f64,
    pub l2d: f64,
    pub smpl: f64,
    pub adv: f64,
    pub flow: f64,
    pub disc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
}

/// Mean of `total` over a window of `w` steps ending at index `end`
/// (exclusive).
pub fn moving_average(log: &[StepLog], end: usize, w: usize) -> f64 {
    let start = end.saturating_sub(w);
    let xs = &log[start..end];
    xs.iter().map(|s| s.total).sum::<f64>() / xs.len().max(1) as f64
}

/// Per-sequence tensors in the layout the losses expect.
struct Sample {
    frames: Tensor,
    flows: Tensor,
    joints3d: Tensor,
    joints2d: Tensor,
    rotations: Tensor,
    betas: Tensor,
}

impl Sample {
    fn new(seq: &FrameSequence) -> Self {
        let t = seq.len();
        Self {
            frames: seq.frames.clone(),
            flows: seq.flows.clone(),
            joints3d: seq.joints3d.clone(),
            joints2d: seq.joints2d_normalized(),
            rotations: axis_angle_tensor_to_matrices(&seq.pose),
            betas: Tensor::from_fn(&[t, NUM_BETAS], |i| seq.shape[i % NUM_BETAS]),
        }
    }
}

/// `B` samples stacked; per-frame targets flattened to `B * T` rows.
struct Batch {
    frames: Tensor,
    flows: Tensor,
    joints3d: Tensor,
    joints2d: Tensor,
    rotations: Tensor,
    betas: Tensor,
    b: usize,
    t: usize,
}

fn concat(parts: Vec<&Tensor>, lead: &[usize]) -> Tensor {
    let mut shape = lead.to_vec();
    shape.extend_from_slice(&parts[0].shape()[1..]);
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::from_vec(&shape, data)
}

impl Batch {
    fn new(samples: &[Sample], idx: &[usize]) -> Self {
        let pick = |f: fn(&Sample) -> &Tensor| idx.iter().map(|&i| f(&samples[i])).collect::<Vec<_>>();
        let (b, t) = (idx.len(), samples[idx[0]].frames.shape()[0]);
        Self {
            frames: concat(pick(|s| &s.frames), &[b, t]),
            flows: concat(pick(|s| &s.flows), &[b, t]),
            joints3d: concat(pick(|s| &s.joints3d), &[b * t]),
            joints2d: concat(pick(|s| &s.joints2d), &[b * t]),
            rotations: concat(pick(|s| &s.rotations), &[b * t]),
            betas: concat(pick(|s| &s.betas), &[b * t]),
            b,
            t,
        }
    }
}

/// Epoch-wise shuffled batches of sequence indices.
struct Batcher {
    n: usize,
    size: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, size: usize, rng: ChaCha8Rng) -> Self {
        Self { n, size: size.min(n), order: Vec::new(), pos: 0, rng }
    }

    fn next(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.size);
        while out.len() < self.size {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn check_data(data: &[FrameSequence]) -> Result<()> {
    let first = data.first().ok_or_else(|| Error::Config("training needs at least one sequence".into()))?;
    if first.len() < 2 {
        return Err(Error::TooShort { op: "train", min: 2, got: first.len() });
    }
    for s in data {
        if s.frames.shape() != first.frames.shape() {
            return Err(Error::shape("dataset", first.frames.shape(), s.frames.shape()));
        }
    }
    Ok(())
}

struct SupervisedTerms {
    l3d: Var,
    l2d: Var,
    smpl: Var,
}

fn supervised(g: &mut Graph, cfg: &Config, out: &crate::model::Forward, batch: &Batch) -> SupervisedTerms {
    let red = cfg.train.reduction;
    let gt3 = g.constant(batch.joints3d.clone());
    let gt2 = g.constant(batch.joints2d.clone());
    let gr = g.constant(batch.rotations.clone());
    let gb = g.constant(batch.betas.clone());
    SupervisedTerms {
        l3d: loss_3d_var(g, gt3, out.joints3d, red),
        l2d: loss_2d_var(g, gt2, out.joints3d, out.camera, red),
        smpl: loss_smpl_var(g, gr, out.rotations, gb, out.betas, red),
    }
}

fn apply_update(opt: &mut Adam, params: &mut ParamStore, mut grads: BTreeMap<String, Tensor>, clip: f64) {
    if clip > 0.0 {
        clip_global_norm(&mut grads, clip);
    }
    opt.update(params, &grads);
}

fn log_step(cfg: &Config, phase: &str, s: &StepLog) {
    debug!("{phase} step {} total {:.6} l3d {:.6} l2d {:.6} smpl {:.6} adv {:.6} flow {:.6} disc {:.6}", s.step, s.total, s.l3d, s.l2d, s.smpl, s.adv, s.flow, s.disc);
    if cfg.train.log_every > 0 && s.step % cfg.train.log_every == 0 {
        info!("{phase} step {} total {:.4}", s.step, s.total);
    }
}

/// Initial checkpoint for `cfg`.
pub fn initialize(cfg: &Config, template: &BodyTemplate) -> Result<Checkpoint> {
    cfg.validate()?;
    let model = Model::new(&cfg.model, template.clone());
    Ok(Checkpoint::new(cfg.clone(), model.init(cfg.train.seed)))
}

/// Adversarial phase: alternate one generator step on the weighted
/// supervised and adversarial losses with one discriminator step.
pub fn train_phase1(cfg: &Config, template: &BodyTemplate, data: &[FrameSequence], pool: &PosePool) -> Result<TrainOutcome> {
    let ck = initialize(cfg, template)?;
    continue_phase1(ck, template, data, pool, cfg.train.steps_phase1)
}

/// Run `steps` more adversarial steps from `ck`.
pub fn continue_phase1(mut ck: Checkpoint, template: &BodyTemplate, data: &[FrameSequence], pool: &PosePool, steps: u64) -> Result<TrainOutcome> {
    let cfg = ck.config.clone();
    check_data(data)?;
    let t = data[0].len();
    let use_adv = cfg.train.weights.adv > 0.0;
    if use_adv {
        if pool.is_empty() {
            return Err(Error::Config("the adversarial loss needs a non-empty pose pool".into()));
        }
        if pool.seq_len() != Some(t) {
            return Err(Error::shape("pose pool", &[t], &[pool.seq_len().unwrap_or(0)]));
        }
    }
    let model = Model::new(&cfg.model, template.clone());
    let samples: Vec<Sample> = data.iter().map(Sample::new).collect();
    let seed = cfg.train.seed.wrapping_add(ck.step);
    let mut batcher = Batcher::new(samples.len(), cfg.train.batch_size, stream(seed, 2));
    let mut dropout_rng = stream(seed, 3);
    let mut pool_rng = stream(seed, 4);
    let k = template.num_joints();
    let dcfg = cfg.model.discriminator.clone();
    let mut log = Vec::with_capacity(steps as usize);

    for _ in 0..steps {
        let step = ck.step + 1;
        let batch = Batch::new(&samples, &batcher.next());
        let (b, tt) = (batch.b, batch.t);

        // generator
        let mut g = Graph::new();
        let (grads, fake, entry) = {
            let mut ctx = Ctx::train(&ck.params, Some(&mut dropout_rng));
            let out = model.forward(&mut g, &mut ctx, &batch.frames, &batch.flows)?;
            let sup = supervised(&mut g, &cfg, &out, &batch);
            let adv = if use_adv {
                let mut dctx = Ctx::eval(&ck.params);
                let fake = g.reshape(out.rotations, &[b, tt, k * 9]);
                let scores = dm_score_var(&mut g, &mut dctx, &dcfg, fake);
                adv_gen_loss_var(&mut g, scores)
            } else {
                g.scalar(0.0)
            };
            let total = total_loss_var(&mut g, [sup.l3d, sup.l2d, sup.smpl, adv], &cfg.train.weights);
            let v = |g: &Graph, x: Var| g.value(x).item();
            let entry = StepLog {
                step,
                total: v(&g, total),
                l3d: v(&g, sup.l3d),
                l2d: v(&g, sup.l2d),
                smpl: v(&g, sup.smpl),
                adv: v(&g, adv),
                ..StepLog::default()
            };
            if !entry.total.is_finite() {
                return Err(Error::Divergence { step });
            }
            let grads = g.backward(total).params();
            (grads, g.value(out.rotations).reshaped(&[b, tt, k * 9]), entry)
        };
        let grads: BTreeMap<String, Tensor> = grads.into_iter().filter(|(n, _)| is_generator_param(n)).collect();
        apply_update(&mut ck.gen_opt, &mut ck.params, grads, cfg.train.clip_norm);

        // discriminator on detached fakes
        let mut entry = entry;
        if use_adv {
            let real: Vec<Tensor> = (0..b)
                .map(|_| {
                    let s = pool.sample(&mut pool_rng);
                    axis_angle_tensor_to_matrices(&s.reshaped(&[t, k, 3])).reshaped(&[t, k * 9])
                })
                .collect();
            let real = Tensor::stack(&real).expect("pool sequences share a shape");
            let mut g = Graph::new();
            let mut ctx = Ctx::train(&ck.params, None);
            let r = g.constant(real);
            let f = g.constant(fake);
            let rs = dm_score_var(&mut g, &mut ctx, &dcfg, r);
            let fs = dm_score_var(&mut g, &mut ctx, &dcfg, f);
            let ld = disc_loss_var(&mut g, rs, fs);
            entry.disc = g.value(ld).item();
            if !entry.disc.is_finite() {
                return Err(Error::Divergence { step });
            }
            let grads = g.backward(ld).params();
            apply_update(&mut ck.disc_opt, &mut ck.params, grads, cfg.train.clip_norm);
        }
        ck.step = step;
        log_step(&cfg, "phase1", &entry);
        log.push(entry);
    }
    if steps > 0 {
        ck.phase = Phase::Adversarial;
    }
    Ok(TrainOutcome { checkpoint: ck, log })
}

/// Refinement without the discriminator: supervised losses plus the
/// weighted flow loss when enabled, with a fresh generator optimizer at the
/// refinement rate. Discriminator weights are left untouched.
pub fn train_phase2_refine(ck: &Checkpoint, template: &BodyTemplate, data: &[FrameSequence], steps: u64) -> Result<TrainOutcome> {
    let cfg = ck.config.clone();
    cfg.validate()?;
    check_data(data)?;
    let mut ck = ck.clone();
    let t = &cfg.train;
    ck.gen_opt = Adam::with_betas(t.lr_refine, t.beta1, t.beta2, t.eps);
    let model = Model::new(&cfg.model, template.clone());
    let samples: Vec<Sample> = data.iter().map(Sample::new).collect();
    let seed = t.seed.wrapping_add(ck.step);
    let mut batcher = Batcher::new(samples.len(), t.batch_size, stream(seed, 5));
    let mut dropout_rng = stream(seed, 6);
    let k = template.num_joints();
    let use_flow = t.flow_loss && t.flow_weight > 0.0;
    let mut log = Vec::with_capacity(steps as usize);

    for _ in 0..steps {
        let step = ck.step + 1;
        let batch = Batch::new(&samples, &batcher.next());
        let mut g = Graph::new();
        let (grads, entry) = {
            let mut ctx = Ctx::train(&ck.params, Some(&mut dropout_rng));
            let out = model.forward(&mut g, &mut ctx, &batch.frames, &batch.flows)?;
            let sup = supervised(&mut g, &cfg, &out, &batch);
            let zero = g.scalar(0.0);
            let base = total_loss_var(&mut g, [sup.l3d, sup.l2d, sup.smpl, zero], &t.weights);
            let (total, flow) = if use_flow {
                let p2 = project_var(&mut g, out.joints3d, out.camera);
                let p2 = g.reshape(p2, &[batch.b, batch.t, k, 2]);
                let lf = loss_flow_var(&mut g, p2, &batch.flows, t.reduction);
                let wf = g.scale(lf, t.flow_weight);
                (g.add(base, wf), lf)
            } else {
                (base, zero)
            };
            let v = |g: &Graph, x: Var| g.value(x).item();
            let entry = StepLog {
                step,
                total: v(&g, total),
                l3d: v(&g, sup.l3d),
                l2d: v(&g, sup.l2d),
                smpl: v(&g, sup.smpl),
                flow: v(&g, flow),
                ..StepLog::default()
            };
            if !entry.total.is_finite() {
                return Err(Error::Divergence { step });
            }
            (g.backward(total).params(), entry)
        };
        let grads: BTreeMap<String, Tensor> = grads.into_iter().filter(|(n, _)| is_generator_param(n)).collect();
        apply_update(&mut ck.gen_opt, &mut ck.params, grads, t.clip_norm);
        ck.step = step;
        log_step(&cfg, "refine", &entry);
        log.push(entry);
    }
    if steps > 0 {
        ck.phase = Phase::Refined;
    }
    Ok(TrainOutcome { checkpoint: ck, log })
}

/// Dataset-level metrics in millimetres (accel in mm/s²).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pa_mpjpe: f64,
    pub mpjpe: f64,
    pub pve: f64,
    pub accel: f64,
    pub sequences: usize,
    pub frames: usize,
}

pub const REPORT_COLUMNS: [&str; 4] = ["PA-MPJPE", "MPJPE", "PVE", "Accel"];

impl EvalReport {
    pub fn values(&self) -> [f64; 4] {
        [self.pa_mpjpe, self.mpjpe, self.pve, self.accel]
    }

    pub fn table(&self, label: &str) -> String {
        format_table(&[(label.to_string(), *self)])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Plain-text table, one row per labelled report.
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:width$}", "Method");
    for c in REPORT_COLUMNS {
        let _ = write!(out, " {c:>9}");
    }
    out.push('\n');
    for (label, r) in rows {
        let _ = write!(out, "{label:width$}");
        for v in r.values() {
            let _ = write!(out, " {v:>9.2}");
        }
        out.push('\n');
    }
    out
}

struct SeqMetrics {
    pa: f64,
    mpjpe: f64,
    pve: f64,
    accel: f64,
    frames: usize,
}

fn meshes(template: &BodyTemplate, params: &[SmplParams]) -> Result<(Tensor, Tensor)> {
    let mut joints = Vec::with_capacity(params.len());
    let mut verts = Vec::with_capacity(params.len());
    for p in params {
        let m = forward(template, p)?;
        joints.push(m.joints3d.map(|x| x * MM_PER_M));
        verts.push(m.vertices.map(|x| x * MM_PER_M));
    }
    Ok((Tensor::stack(&joints).expect("same joints"), Tensor::stack(&verts).expect("same vertices")))
}

fn root_of(joints: &Tensor) -> Tensor {
    let t = joints.shape()[0];
    Tensor::from_fn(&[t, 3], |i| joints.get(&[i / 3, 0, i % 3]))
}

fn sequence_metrics(template: &BodyTemplate, seq: &FrameSequence, pred: &[SmplParams]) -> Result<SeqMetrics> {
    let t = seq.len();
    if pred.len() != t {
        return Err(Error::shape("evaluate", &[t], &[pred.len()]));
    }
    let gt: Vec<SmplParams> = (0..t).map(|i| seq.params(i)).collect();
    let (gj, gv) = meshes(template, &gt)?;
    let (pj, pv) = meshes(template, pred)?;
    let (gj_c, pj_c) = (metrics::root_center(&gj), metrics::root_center(&pj));
    let gv_c = metrics::center_on(&gv, &root_of(&gj));
    let pv_c = metrics::center_on(&pv, &root_of(&pj));
    Ok(SeqMetrics {
        pa: metrics::pa_mpjpe(&gj_c, &pj_c)?,
        mpjpe: metrics::mpjpe(&gj_c, &pj_c)?,
        pve: metrics::pve(&gv_c, &pv_c)?,
        accel: if t >= 3 { metrics::accel_error(&gj_c, &pj_c, seq.fps)? } else { 0.0 },
        frames: t,
    })
}

/// Metrics of given per-frame predictions against the dataset's ground
/// truth; frame-weighted over sequences.
pub fn evaluate_predictions(template: &BodyTemplate, data: &[FrameSequence], preds: &[Vec<SmplParams>]) -> Result<EvalReport> {
    if data.len() != preds.len() {
        return Err(Error::shape("evaluate", &[data.len()], &[preds.len()]));
    }
    #[cfg(feature = "parallel")]
    let per: Vec<Result<SeqMetrics>> = data.par_iter().zip(preds.par_iter()).map(|(s, p)| sequence_metrics(template, s, p)).collect();
    #[cfg(not(feature = "parallel"))]
    let per: Vec<Result<SeqMetrics>> = data.iter().zip(preds).map(|(s, p)| sequence_metrics(template, s, p)).collect();
    let mut r = EvalReport { sequences: data.len(), ..EvalReport::default() };
    let mut accel_w = 0usize;
    for m in per {
        let m = m?;
        let f = m.frames as f64;
        r.pa_mpjpe += m.pa * f;
        r.mpjpe += m.mpjpe * f;
        r.pve += m.pve * f;
        let aw = m.frames.saturating_sub(2);
        r.accel += m.accel * aw as f64;
        r.frames += m.frames;
        accel_w += aw;
    }
    if r.frames > 0 {
        let f = r.frames as f64;
        r.pa_mpjpe /= f;
        r.mpjpe /= f;
        r.pve /= f;
    }
    if accel_w > 0 {
        r.accel /= accel_w as f64;
    }
    Ok(r)
}

pub fn predict_dataset(ck: &Checkpoint, template: &BodyTemplate, data: &[FrameSequence]) -> Result<Vec<Vec<SmplParams>>> {
    let model = Model::new(&ck.config.model, template.clone());
    data.iter().map(|s| Ok(model.predict(&ck.params, s, false)?.params)).collect()
}

pub fn evaluate(ck: &Checkpoint, template: &BodyTemplate, data: &[FrameSequence]) -> Result<EvalReport> {
    let preds = predict_dataset(ck, template, data)?;
    evaluate_predictions(template, data, &preds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    GruTr,
    TeHr,
    TeTr,
    WithoutFlow,
    WithFlow,
    WithFlowLoss,
}

impl Variant {
    pub const ARCHITECTURE: [Variant; 3] = [Variant::GruTr, Variant::TeHr, Variant::TeTr];
    pub const FLOW: [Variant; 3] = [Variant::WithoutFlow, Variant::WithFlow, Variant::WithFlowLoss];

    pub fn label(self) -> &'static str {
        match self {
            Variant::GruTr => "GRU+TR",
            Variant::TeHr => "TE+HR",
            Variant::TeTr => "TE+TR",
            Variant::WithoutFlow => "w/o flow",
            Variant::WithFlow => "w/ flow",
            Variant::WithFlowLoss => "w/ flow+flow loss",
        }
    }

    fn is_architecture(self) -> bool {
        Self::ARCHITECTURE.contains(&self)
    }

    /// The variant's config and whether it is refined after phase 1.
    pub fn apply(self, base: &Config) -> (Config, bool) {
        let mut c = base.clone();
        c.train.steps_phase1 = base.train.ablation_steps_phase1;
        c.train.steps_phase2 = base.train.ablation_steps_phase2;
        let (enc, reg, flow, refine) = match self {
            Variant::GruTr => (EncoderKind::Gru, RegressorKind::Transformer, true, true),
            Variant::TeHr => (EncoderKind::Transformer, RegressorKind::Hmr, true, true),
            Variant::TeTr | Variant::WithFlowLoss => (EncoderKind::Transformer, RegressorKind::Transformer, true, true),
            Variant::WithoutFlow => (EncoderKind::Transformer, RegressorKind::Transformer, false, false),
            Variant::WithFlow => (EncoderKind::Transformer, RegressorKind::Transformer, true, false),
        };
        c.model.encoder = enc;
        c.model.regressor = reg;
        c.model.flow_feature = flow;
        c.train.flow_loss = refine;
        (c, refine)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub report: EvalReport,
    pub model_hash: String,
    pub schedule_hash: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AblationTables {
    pub architecture: Vec<AblationRow>,
    pub flow: Vec<AblationRow>,
}

impl AblationTables {
    pub fn format(&self) -> String {
        let rows = |v: &[AblationRow]| v.iter().map(|r| (r.label.clone(), r.report)).collect::<Vec<_>>();
        let mut out = String::new();
        if !self.architecture.is_empty() {
            out.push_str("Encoder / regressor\n");
            out.push_str(&format_table(&rows(&self.architecture)));
        }
        if !self.flow.is_empty() {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str("Flow feature / flow loss\n");
            out.push_str(&format_table(&rows(&self.flow)));
        }
        out
    }
}

/// Train and evaluate each requested variant under the same data, seed
/// and schedule. Variants sharing a training run reuse it. Rows come out
/// in the canonical table order regardless of the order requested.
pub fn run_ablation(
    base: &Config,
    variants: &[Variant],
    template: &BodyTemplate,
    train: &[FrameSequence],
    eval: &[FrameSequence],
    pool: &PosePool,
) -> Result<AblationTables> {
    let mut phase1: BTreeMap<String, Checkpoint> = BTreeMap::new();
    let mut reports: BTreeMap<(String, bool), EvalReport> = BTreeMap::new();
    let mut tables = AblationTables::default();
    for v in Variant::ARCHITECTURE.iter().chain(&Variant::FLOW).filter(|v| variants.contains(v)) {
        let (cfg, refine) = v.apply(base);
        let key = (cfg.model_hash(), refine);
        let report = match reports.get(&key) {
            Some(r) => *r,
            None => {
                if !phase1.contains_key(&key.0) {
                    info!("ablation {}: phase 1 ({} steps)", v.label(), cfg.train.steps_phase1);
                    let out = train_phase1(&cfg, template, train, pool)?;
                    phase1.insert(key.0.clone(), out.checkpoint);
                }
                let mut ck = phase1[&key.0].clone();
                ck.config = cfg.clone();
                if refine {
                    info!("ablation {}: refinement ({} steps)", v.label(), cfg.train.steps_phase2);
                    ck = train_phase2_refine(&ck, template, train, cfg.train.steps_phase2)?.checkpoint;
                }
                let r = evaluate(&ck, template, eval)?;
                reports.insert(key.clone(), r);
                r
            }
        };
        let row = AblationRow {
            label: v.label().to_string(),
            report,
            model_hash: key.0,
            schedule_hash: cfg.schedule_hash(),
        };
        if v.is_architecture() {
            tables.architecture.push(row);
        } else {
            tables.flow.push(row);
        }
    }
    Ok(tables)
}

const ATTENTION_MAGIC: &str = "AT1";

pub fn write_attention_record(path: &Path, record: &AttentionRecord) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    container::write_magic(&mut w, ATTENTION_MAGIC)?;
    container::write_array(&mut w, &NamedArray::f64("weights", &record.weights))?;
    w.flush()?;
    Ok(())
}

pub fn read_attention_record(path: &Path) -> Result<AttentionRecord> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    container::read_magic(&mut r, ATTENTION_MAGIC)?;
    let a = container::read_array(&mut r)?;
    let weights = a.to_tensor()?;
    if weights.ndim() != 4 {
        return Err(crate::container::FormatError::Malformed(format!("attention record has shape {:?}", weights.shape())).into());
    }
    Ok(AttentionRecord { weights })
}

/// Write `seq{i:05}.att` for every sequence plus, per head of the first
/// encoder layer, the averaged map as `summary_head{h}.txt` and
/// `summary_head{h}.pgm`. Returns the `[h, T, T]` summary.
pub fn dump_attention(ck: &Checkpoint, template: &BodyTemplate, data: &[FrameSequence], out_dir: &Path) -> Result<Tensor> {
    if ck.config.model.encoder != EncoderKind::Transformer {
        return Err(Error::Variant("attention maps need the transformer encoder".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let model = Model::new(&ck.config.model, template.clone());
    let mut records = Vec::with_capacity(data.len());
    for (i, s) in data.iter().enumerate() {
        let rec = model.predict(&ck.params, s, true)?.attention.expect("transformer records attention");
        write_attention_record(&out_dir.join(format!("seq{i:05}.att")), &rec)?;
        records.push(rec);
    }
    let summary = attention_summary(&records)?;
    for h in 0..summary.shape()[0] {
        let map = summary.slice0(h);
        std::fs::write(out_dir.join(format!("summary_head{h}.txt")), metrics::format_grid(&map))?;
        let f = BufWriter::new(std::fs::File::create(out_dir.join(format!("summary_head{h}.pgm")))?);
        metrics::write_pgm(f, &map, 8)?;
    }
    Ok(summary)
}
