//! Supervised losses, the flow back-trace and the flow loss.

use flowpose_tensor::{bilinear_at, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::body_model::{project_var, SmplParams};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Divide by the number of frames (and joints where applicable).
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l3d: f64,
    pub l2d: f64,
    pub smpl: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l3d: 300.0,
            l2d: 200.0,
            smpl: 120.0,
            adv: 60.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.l3d, self.l2d, self.smpl, self.adv].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be nonnegative, got {self:?}")));
        }
        Ok(())
    }
}

fn reduce(g: &mut Graph, sum: Var, count: usize, reduction: Reduction) -> Var {
    match reduction {
        Reduction::Sum => sum,
        Reduction::Mean => g.scale(sum, 1.0 / count.max(1) as f64),
    }
}

/// `[J, J]` matrix subtracting joint 0 from every joint.
fn centering(j: usize) -> Tensor {
    let mut c = Tensor::eye(j);
    for r in 0..j {
        let v = c.get(&[r, 0]);
        c.set(&[r, 0], v - 1.0);
    }
    c
}

/// Root-centre `[N, J, 3]` joints.
pub fn center_var(g: &mut Graph, joints: Var) -> Var {
    let j = g.shape(joints)[1];
    let c = g.constant(centering(j));
    g.matmul(c, joints)
}

/// Squared distance between root-centred `[N, J, 3]` joint sets.
pub fn loss_3d_var(g: &mut Graph, gt: Var, pred: Var, reduction: Reduction) -> Var {
    let s = g.shape(pred).to_vec();
    let a = center_var(g, gt);
    let b = center_var(g, pred);
    let d = g.sub(b, a);
    let sq = g.square(d);
    let total = g.sum(sq);
    reduce(g, total, s[0] * s[1], reduction)
}

/// Squared distance between normalised `[N, J, 2]` keypoints and the
/// weak-perspective projection of `[N, J, 3]` joints under `[N, 3]` cameras.
pub fn loss_2d_var(g: &mut Graph, gt2d: Var, pred3d: Var, camera: Var, reduction: Reduction) -> Var {
    let s = g.shape(gt2d).to_vec();
    let p = project_var(g, pred3d, camera);
    let d = g.sub(p, gt2d);
    let sq = g.square(d);
    let total = g.sum(sq);
    reduce(g, total, s[0] * s[1], reduction)
}

/// Squared Frobenius distance of `[N, K, 3, 3]` rotations plus squared
/// distance of `[N, 10]` shapes.
pub fn loss_smpl_var(g: &mut Graph, gt_rot: Var, pred_rot: Var, gt_beta: Var, pred_beta: Var, reduction: Reduction) -> Var {
    let s = g.shape(gt_rot).to_vec();
    let (n, k) = (s[0], s[1]);
    let dr = g.sub(pred_rot, gt_rot);
    let dr = g.square(dr);
    let dr = g.sum(dr);
    let db = g.sub(pred_beta, gt_beta);
    let db = g.square(db);
    let db = g.sum(db);
    let pose = reduce(g, dr, n * k, reduction);
    let shape = reduce(g, db, n, reduction);
    g.add(pose, shape)
}

/// Previous-frame positions `X - flow(X)` of `[N, J, 2]` pixel points,
/// sampling `[N, H, W, 2]` flow bilinearly with border clamping.
pub fn backtrace_var(g: &mut Graph, points: Var, flows: &Tensor) -> Var {
    let f = g.bilinear_sample(flows, points);
    g.sub(points, f)
}

/// Back-trace consistency of normalised `[B, T, J, 2]` joints against
/// `[B, T, H, W, 2]` flows, measured in normalised units. Frame 0's flow is
/// never read.
pub fn loss_flow_var(g: &mut Graph, joints2d: Var, flows: &Tensor, reduction: Reduction) -> Var {
    let s = g.shape(joints2d).to_vec();
    let (b, t, j) = (s[0], s[1], s[2]);
    let fs = flows.shape();
    assert_eq!(&fs[..2], &[b, t], "flow/joint sequence mismatch");
    assert!(t >= 2, "flow loss needs at least two frames");
    let (h, w) = (fs[2], fs[3]);
    let frame = h * w * 2;
    let mut later = Vec::with_capacity(b * (t - 1) * frame);
    for bi in 0..b {
        let base = bi * t * frame;
        later.extend_from_slice(&flows.data()[base + frame..base + t * frame]);
    }
    let later = Tensor::from_vec(&[b * (t - 1), h, w, 2], later);

    let half = g.constant(Tensor::from_vec(&[2], vec![w as f64 / 2.0, h as f64 / 2.0]));
    let offset = g.constant(Tensor::from_vec(&[2], vec![w as f64 / 2.0 - 0.5, h as f64 / 2.0 - 0.5]));
    let cur = g.narrow(joints2d, 1, 1, t - 1);
    let cur = g.reshape(cur, &[b * (t - 1), j, 2]);
    let prev = g.narrow(joints2d, 1, 0, t - 1);
    let prev = g.reshape(prev, &[b * (t - 1), j, 2]);
    let px = g.mul(cur, half);
    let px = g.add(px, offset);
    let sampled = g.bilinear_sample(&later, px);
    let sampled = g.div(sampled, half);
    // prev - (cur - flow) in normalised units
    let step = g.sub(prev, cur);
    let d = g.add(step, sampled);
    let sq = g.square(d);
    let total = g.sum(sq);
    reduce(g, total, b * (t - 1) * j, reduction)
}

/// `λ · parts` for `[L3D, L2D, Lsmpl, Ladv]`.
pub fn total_loss_var(g: &mut Graph, parts: [Var; 4], weights: &LossWeights) -> Var {
    let w = [weights.l3d, weights.l2d, weights.smpl, weights.adv];
    let mut acc = g.scale(parts[0], w[0]);
    for i in 1..4 {
        let p = g.scale(parts[i], w[i]);
        acc = g.add(acc, p);
    }
    acc
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn eval1(f: impl FnOnce(&mut Graph) -> Var) -> f64 {
    let mut g = Graph::inference();
    let v = f(&mut g);
    g.value(v).item()
}

pub fn loss_3d(gt: &Tensor, pred: &Tensor, reduction: Reduction) -> Result<f64> {
    check_same("loss_3d", gt, pred)?;
    Ok(eval1(|g| {
        let (a, b) = (g.constant(gt.clone()), g.constant(pred.clone()));
        loss_3d_var(g, a, b, reduction)
    }))
}

/// `gt2d` normalised `[T, J, 2]`, `pred3d` `[T, J, 3]`, cameras `[T, 3]`.
pub fn loss_2d(gt2d: &Tensor, pred3d: &Tensor, cameras: &Tensor, reduction: Reduction) -> Result<f64> {
    let (t, j) = (pred3d.shape()[0], pred3d.shape()[1]);
    if gt2d.shape() != [t, j, 2] || cameras.shape() != [t, 3] {
        return Err(Error::shape("loss_2d", &[t, j, 2], gt2d.shape()));
    }
    Ok(eval1(|g| {
        let (a, b, c) = (g.constant(gt2d.clone()), g.constant(pred3d.clone()), g.constant(cameras.clone()));
        loss_2d_var(g, a, b, c, reduction)
    }))
}

fn rotation_tensor(ps: &[SmplParams]) -> Result<Tensor> {
    let k = ps.first().map_or(0, |p| p.pose.num_joints());
    let mut data = Vec::with_capacity(ps.len() * k * 9);
    for p in ps {
        if p.pose.num_joints() != k {
            return Err(Error::Representation("frames have different joint counts".into()));
        }
        for r in p.pose.rotations()? {
            data.extend((0..9).map(|i| r[(i / 3, i % 3)]));
        }
    }
    Ok(Tensor::from_vec(&[ps.len(), k, 3, 3], data))
}

/// Parameter loss between two sequences, comparing poses as rotation
/// matrices so axis-angle and 6D inputs can be mixed.
pub fn loss_smpl(gt: &[SmplParams], pred: &[SmplParams], reduction: Reduction) -> Result<f64> {
    if gt.len() != pred.len() {
        return Err(Error::shape("loss_smpl", &[gt.len()], &[pred.len()]));
    }
    let (ra, rb) = (rotation_tensor(gt)?, rotation_tensor(pred)?);
    if ra.shape() != rb.shape() {
        return Err(Error::Representation(format!(
            "pose joint counts differ: {:?} vs {:?}",
            ra.shape(),
            rb.shape()
        )));
    }
    let betas = |ps: &[SmplParams]| Tensor::from_vec(&[ps.len(), 10], ps.iter().flat_map(|p| p.shape).collect());
    let (ba, bb) = (betas(gt), betas(pred));
    Ok(eval1(|g| {
        let (a, b, c, d) = (g.constant(ra), g.constant(rb), g.constant(ba), g.constant(bb));
        loss_smpl_var(g, a, b, c, d, reduction)
    }))
}

/// `[J, 2]` pixel joints traced back through one `[H, W, 2]` flow field.
pub fn backtrace_joints(x2d: &Tensor, flow: &Tensor) -> Tensor {
    let mut out = x2d.clone();
    for p in out.data_mut().chunks_mut(2) {
        let f = bilinear_at(flow, p[0], p[1]);
        p[0] -= f[0];
        p[1] -= f[1];
    }
    out
}

/// Flow loss of one sequence: normalised `[T, J, 2]` joints and
/// `[T, H, W, 2]` pixel flows.
pub fn loss_flow(joints2d: &Tensor, flows: &Tensor, reduction: Reduction) -> Result<f64> {
    let (t, j) = (joints2d.shape()[0], joints2d.shape()[1]);
    if t < 2 {
        return Err(Error::TooShort { op: "loss_flow", min: 2, got: t });
    }
    if flows.ndim() != 4 || flows.shape()[0] != t || flows.shape()[3] != 2 {
        return Err(Error::shape("loss_flow", &[t, 0, 0, 2], flows.shape()));
    }
    let mut fs = vec![1];
    fs.extend_from_slice(flows.shape());
    Ok(eval1(|g| {
        let x = g.constant(joints2d.reshaped(&[1, t, j, 2]));
        loss_flow_var(g, x, &flows.reshaped(&fs), reduction)
    }))
}

pub fn total_loss(parts: [f64; 4], weights: &LossWeights) -> f64 {
    parts[0] * weights.l3d + parts[1] * weights.l2d + parts[2] * weights.smpl + parts[3] * weights.adv
}
