//! Synthetic video sequences with exact ground truth, the dataset file
//! format and the pool of real motions for the discriminator.

mod io;
mod motion;
mod pool;
mod render;

use flowpose_tensor::Tensor;
use serde::{Deserialize, Serialize};
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::body_model::{to_normalized, BodyTemplate, SmplParams, NUM_BETAS};
use crate::error::Result;

pub use io::{read_dataset, read_dataset_from, write_dataset, write_dataset_to};
pub use motion::{catmull_rom, gen_motion, max_joint_speed, MotionGt, KEY_STRIDE};
pub use pool::{build_pose_pool, parse_pose_text, PosePool};
pub use render::{exact_flow, joint_color, quantize_f32, render_frames, DEFAULT_SIGMA, RESPONSIBILITY_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seq_len: usize,
    pub height: usize,
    pub width: usize,
    pub smoothness: f64,
    pub sigma: f64,
    pub fps: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seq_len: 16,
            height: 64,
            width: 64,
            smoothness: 1.0,
            sigma: DEFAULT_SIGMA,
            fps: 30.0,
        }
    }
}

/// One rendered sequence with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    /// `[T, H, W, 3]` in `[0, 1]`.
    pub frames: Tensor,
    /// `[T, H, W, 2]` backward pixel displacements; frame 0 is zero.
    pub flows: Tensor,
    /// `[T, K, 3]` axis-angle.
    pub pose: Tensor,
    pub shape: [f64; NUM_BETAS],
    /// `[T, 3]`
    pub cameras: Tensor,
    /// `[T, K, 3]`, metres.
    pub joints3d: Tensor,
    /// `[T, K, 2]`, pixels.
    pub joints2d: Tensor,
    pub fps: f64,
    pub id: u64,
    pub seed: u64,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn num_joints(&self) -> usize {
        self.joints3d.shape()[1]
    }

    pub fn params(&self, t: usize) -> SmplParams {
        motion::frame_params(&self.pose, &self.shape, &self.cameras, t)
    }

    /// `[T, K, 2]` joints in normalised image coordinates.
    pub fn joints2d_normalized(&self) -> Tensor {
        let (h, w) = (self.height(), self.width());
        let mut out = self.joints2d.clone();
        for p in out.data_mut().chunks_mut(2) {
            p[0] = to_normalized(p[0], w);
            p[1] = to_normalized(p[1], h);
        }
        out
    }
}

pub fn gen_sequence(tpl: &BodyTemplate, cfg: &GenConfig, id: u64, seed: u64) -> Result<FrameSequence> {
    let gt = gen_motion(tpl, seed, cfg.seq_len, cfg.smoothness)?;
    let px = gt.joints_pixels(cfg.height, cfg.width);
    let frames = quantize_f32(render_frames(&px, cfg.height, cfg.width, cfg.sigma)?);
    let flows = quantize_f32(exact_flow(&px, cfg.height, cfg.width, cfg.sigma));
    Ok(FrameSequence {
        frames,
        flows,
        pose: gt.pose,
        shape: gt.shape,
        cameras: gt.cameras,
        joints3d: gt.joints3d,
        joints2d: px,
        fps: cfg.fps,
        id,
        seed,
    })
}

/// Sequence `i` uses `seeds[i]` and id `i`. Runs in parallel when the
/// `parallel` feature is on; the result does not depend on scheduling.
pub fn generate(tpl: &BodyTemplate, cfg: &GenConfig, seeds: &[u64]) -> Result<Vec<FrameSequence>> {
    #[cfg(feature = "parallel")]
    let it = seeds.par_iter().enumerate();
    #[cfg(not(feature = "parallel"))]
    let it = seeds.iter().enumerate();
    it.map(|(i, &s)| gen_sequence(tpl, cfg, i as u64, s)).collect()
}
