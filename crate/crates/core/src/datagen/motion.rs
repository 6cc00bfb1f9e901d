//! Smooth random motion: Catmull-Rom interpolation of sparse keyframes.

use flowpose_tensor::Tensor;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::body_model::{forward, project_weak_perspective, to_pixels, BodyTemplate, Camera, Pose, SmplParams, NUM_BETAS};
use crate::error::{Error, Result};

/// Frames between consecutive keyframes.
pub const KEY_STRIDE: usize = 4;
/// Largest allowed |coordinate| of any projected joint, normalised units.
const MAX_EXTENT: f64 = 0.92;

/// Per-joint rotation amplitude (radians) before the smoothness divisor.
const JOINT_AMPLITUDE: [f64; 24] = [
    0.30, 0.60, 0.60, 0.25, 0.60, 0.60, 0.25, 0.30, 0.30, 0.25, 0.20, 0.20,
    0.30, 0.20, 0.20, 0.30, 0.70, 0.70, 0.70, 0.70, 0.40, 0.40, 0.30, 0.30,
];

/// Ground truth of one synthetic sequence, before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionGt {
    /// `[T, K, 3]` axis-angle.
    pub pose: Tensor,
    pub shape: [f64; NUM_BETAS],
    /// `[T, 3]` as `(scale, tx, ty)`.
    pub cameras: Tensor,
    /// `[T, K, 3]`, metres.
    pub joints3d: Tensor,
    /// `[T, K, 2]`, normalised image coordinates.
    pub joints2d: Tensor,
}

impl MotionGt {
    pub fn len(&self) -> usize {
        self.pose.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn params(&self, t: usize) -> SmplParams {
        frame_params(&self.pose, &self.shape, &self.cameras, t)
    }

    /// Joint tracks in pixel coordinates for an `height × width` image.
    pub fn joints_pixels(&self, height: usize, width: usize) -> Tensor {
        let mut px = self.joints2d.clone();
        for p in px.data_mut().chunks_mut(2) {
            p[0] = to_pixels(p[0], width);
            p[1] = to_pixels(p[1], height);
        }
        px
    }
}

pub(crate) fn frame_params(pose: &Tensor, shape: &[f64; NUM_BETAS], cameras: &Tensor, t: usize) -> SmplParams {
    let k = pose.shape()[1];
    let p = &pose.data()[t * k * 3..(t + 1) * k * 3];
    let c = &cameras.data()[t * 3..t * 3 + 3];
    SmplParams {
        pose: Pose::AxisAngle(p.chunks(3).map(|a| [a[0], a[1], a[2]]).collect()),
        shape: *shape,
        camera: Camera::new(c[0], c[1], c[2]),
    }
}

/// Cubic Catmull-Rom segment between `p1` and `p2`, `u` in `[0, 1]`.
pub fn catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, u: f64) -> f64 {
    let u2 = u * u;
    let u3 = u2 * u;
    0.5 * (2.0 * p1 + (p2 - p0) * u + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u2 + (3.0 * p1 - p0 - 3.0 * p2 + p3) * u3)
}

/// Sample a `len`-frame trajectory through keyframes placed every
/// [`KEY_STRIDE`] frames. `keys` holds one leading and two trailing guard
/// keys.
fn interpolate(keys: &[f64], len: usize) -> Vec<f64> {
    (0..len)
        .map(|t| {
            let seg = t / KEY_STRIDE;
            let u = (t % KEY_STRIDE) as f64 / KEY_STRIDE as f64;
            catmull_rom(keys[seg], keys[seg + 1], keys[seg + 2], keys[seg + 3], u)
        })
        .collect()
}

/// Random smooth motion for one sequence. Larger `smoothness` shrinks the
/// keyframe spread around the sequence's mean pose; `f64::INFINITY` gives a
/// constant pose.
pub fn gen_motion(tpl: &BodyTemplate, seed: u64, len: usize, smoothness: f64) -> Result<MotionGt> {
    if len < 2 {
        return Err(Error::TooShort { op: "gen_motion", min: 2, got: len });
    }
    let k = tpl.num_joints();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let n_keys = (len - 1) / KEY_STRIDE + 4;

    let mut pose = vec![0.0; len * k * 3];
    for j in 0..k {
        let amp = JOINT_AMPLITUDE[j % JOINT_AMPLITUDE.len()];
        let std = amp * 0.2 / smoothness;
        for a in 0..3 {
            // per-sequence mean pose, then keyframe jitter around it
            let mut base = amp * 0.5 * unit.sample(&mut rng);
            if j == 0 && a == 0 {
                base += std::f64::consts::PI;
            }
            let keys: Vec<f64> = (0..n_keys).map(|_| base + std * unit.sample(&mut rng)).collect();
            // the spline of equal keys is not bitwise constant
            let track = if std == 0.0 { vec![base; len] } else { interpolate(&keys, len) };
            for (t, v) in track.into_iter().enumerate() {
                pose[(t * k + j) * 3 + a] = v;
            }
        }
    }
    let pose = Tensor::from_vec(&[len, k, 3], pose);

    let shape: [f64; NUM_BETAS] = std::array::from_fn(|_| (0.6 * unit.sample(&mut rng)).clamp(-1.5, 1.5));

    let scale0 = rng.random_range(0.75..0.9);
    let t0 = [rng.random_range(-0.05..0.05), -0.12 + rng.random_range(-0.05..0.05)];
    let drift = [rng.random_range(-0.002..0.002), rng.random_range(-0.002..0.002), rng.random_range(-0.002..0.002)];
    let mut cameras = Tensor::from_fn(&[len, 3], |i| {
        let (t, c) = ((i / 3) as f64, i % 3);
        match c {
            0 => scale0 * (1.0 + drift[0] * t),
            1 => t0[0] + drift[1] * t,
            _ => t0[1] + drift[2] * t,
        }
    });

    let mut joints3d = Vec::with_capacity(len * k * 3);
    for t in 0..len {
        let m = forward(tpl, &frame_params(&pose, &shape, &cameras, t))?;
        joints3d.extend_from_slice(m.joints3d.data());
    }
    let joints3d = Tensor::from_vec(&[len, k, 3], joints3d);

    let mut extent: f64 = 0.0;
    for t in 0..len {
        let j2 = project_weak_perspective(&joints3d.slice0(t), camera_at(&cameras, t));
        extent = j2.data().iter().fold(extent, |m, x| m.max(x.abs()));
    }
    if extent > MAX_EXTENT {
        // scaling every camera component scales the projection uniformly
        let f = MAX_EXTENT / extent;
        cameras = cameras.map(|c| c * f);
    }
    let mut joints2d = Vec::with_capacity(len * k * 2);
    for t in 0..len {
        let j2 = project_weak_perspective(&joints3d.slice0(t), camera_at(&cameras, t));
        joints2d.extend_from_slice(j2.data());
    }
    Ok(MotionGt {
        pose,
        shape,
        cameras,
        joints3d,
        joints2d: Tensor::from_vec(&[len, k, 2], joints2d),
    })
}

pub(crate) fn camera_at(cameras: &Tensor, t: usize) -> Camera {
    let c = &cameras.data()[t * 3..t * 3 + 3];
    Camera::new(c[0], c[1], c[2])
}

/// Largest per-frame joint speed of a `[T, K, 3]` track (units per frame).
pub fn max_joint_speed(joints: &Tensor) -> f64 {
    let (len, k) = (joints.shape()[0], joints.shape()[1]);
    let mut best: f64 = 0.0;
    for t in 1..len {
        for j in 0..k {
            let p = |t: usize| Vector3::new(joints.get(&[t, j, 0]), joints.get(&[t, j, 1]), joints.get(&[t, j, 2]));
            best = best.max((p(t) - p(t - 1)).norm());
        }
    }
    best
}
