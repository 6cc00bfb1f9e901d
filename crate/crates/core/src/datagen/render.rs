//! Gaussian-blob imaging model and its analytic optical flow.

use flowpose_tensor::Tensor;

use crate::error::{Error, Result};

pub const DEFAULT_SIGMA: f64 = 2.0;
/// Responsibility below which a pixel carries no flow.
pub const RESPONSIBILITY_EPS: f64 = 1e-3;

/// Fully saturated colour of joint `j`, hues evenly spaced over 24 joints.
pub fn joint_color(j: usize) -> [f64; 3] {
    let h = (j % 24) as f64 / 24.0 * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

fn blob(px: f64, py: f64, jx: f64, jy: f64, sigma: f64) -> f64 {
    let (dx, dy) = (px - jx, py - jy);
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

fn check_in_frame(joints: &Tensor, height: usize, width: usize, sigma: f64) -> Result<()> {
    let k = joints.shape()[1];
    for (i, p) in joints.data().chunks(2).enumerate() {
        let outside = |v: f64, size: usize| v < -0.5 - 2.0 * sigma || v > size as f64 - 0.5 + 2.0 * sigma;
        if !p[0].is_finite() || !p[1].is_finite() || outside(p[0], width) || outside(p[1], height) {
            return Err(Error::OutOfFrame {
                frame: i / k,
                joint: i % k,
                x: p[0],
                y: p[1],
            });
        }
    }
    Ok(())
}

/// Render `[T, H, W, 3]` frames from `[T, K, 2]` pixel-space joint tracks.
pub fn render_frames(joints: &Tensor, height: usize, width: usize, sigma: f64) -> Result<Tensor> {
    let (len, k) = (joints.shape()[0], joints.shape()[1]);
    check_in_frame(joints, height, width, sigma)?;
    let colors: Vec<[f64; 3]> = (0..k).map(joint_color).collect();
    let mut out = vec![0.0; len * height * width * 3];
    let frame = height * width * 3;
    for (t, img) in out.chunks_mut(frame).enumerate() {
        let pts = &joints.data()[t * k * 2..(t + 1) * k * 2];
        for (idx, px) in img.chunks_mut(3).enumerate() {
            let (x, y) = ((idx % width) as f64, (idx / width) as f64);
            for (j, p) in pts.chunks(2).enumerate() {
                let w = blob(x, y, p[0], p[1], sigma);
                for c in 0..3 {
                    px[c] += w * colors[j][c];
                }
            }
            for v in px.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Tensor::from_vec(&[len, height, width, 3], out))
}

/// Backward flow `[T, H, W, 2]`: at each pixel of frame `t`, the pixel
/// displacement since frame `t - 1` of the joint whose blob dominates there.
/// Frame 0 carries no flow.
pub fn exact_flow(joints: &Tensor, height: usize, width: usize, sigma: f64) -> Tensor {
    let (len, k) = (joints.shape()[0], joints.shape()[1]);
    let frame = height * width * 2;
    let mut out = vec![0.0; len * frame];
    for t in 1..len {
        let cur = &joints.data()[t * k * 2..(t + 1) * k * 2];
        let prev = &joints.data()[(t - 1) * k * 2..t * k * 2];
        let img = &mut out[t * frame..(t + 1) * frame];
        for (idx, f) in img.chunks_mut(2).enumerate() {
            let (x, y) = ((idx % width) as f64, (idx / width) as f64);
            let mut best = (RESPONSIBILITY_EPS, None);
            for (j, p) in cur.chunks(2).enumerate() {
                let r = blob(x, y, p[0], p[1], sigma);
                if r >= best.0 {
                    best = (r, Some(j));
                }
            }
            if let Some(j) = best.1 {
                f[0] = cur[2 * j] - prev[2 * j];
                f[1] = cur[2 * j + 1] - prev[2 * j + 1];
            }
        }
    }
    Tensor::from_vec(&[len, height, width, 2], out)
}

/// Round every value through single precision, the on-disk storage type.
pub fn quantize_f32(t: Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(points: &[[f64; 2]], k: usize) -> Tensor {
        let len = points.len() / k;
        Tensor::from_vec(&[len, k, 2], points.iter().flatten().copied().collect())
    }

    #[test]
    fn no_joints_renders_black() {
        let img = render_frames(&Tensor::zeros(&[2, 0, 2]), 8, 8, 2.0).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn static_joint_gives_identical_frames_and_zero_flow() {
        let j = track(&[[15.5, 15.5], [15.5, 15.5]], 1);
        let img = render_frames(&j, 32, 32, 2.0).unwrap();
        assert_eq!(img.slice0(0), img.slice0(1));
        let f = exact_flow(&j, 32, 32, 2.0);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blob_peak_is_at_the_joint_pixel() {
        let j = track(&[[11.0, 20.0]], 1);
        let img = render_frames(&j, 32, 32, 2.0).unwrap();
        let (mut best, mut at) = (f64::MIN, 0);
        for idx in 0..32 * 32 {
            let v: f64 = (0..3).map(|c| img.data()[idx * 3 + c]).sum();
            if v > best {
                best = v;
                at = idx;
            }
        }
        assert_eq!((at % 32, at / 32), (11, 20));
    }

    #[test]
    fn values_are_clipped_to_unit_range() {
        let j = track(&[[5.0, 5.0], [5.0, 5.0], [5.0, 5.0]], 3);
        let img = render_frames(&j, 12, 12, 2.0).unwrap();
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(img.data().contains(&1.0));
    }

    #[test]
    fn far_outside_joint_is_rejected() {
        let j = track(&[[40.0, 5.0]], 1);
        assert!(matches!(render_frames(&j, 32, 32, 2.0), Err(Error::OutOfFrame { joint: 0, .. })));
        // within two sigma of the border is still allowed
        let j = track(&[[34.0, -4.0]], 1);
        assert!(render_frames(&j, 32, 32, 2.0).is_ok());
    }

    #[test]
    fn translating_joint_has_uniform_flow_near_the_blob() {
        let j = track(&[[10.0, 12.0], [12.5, 11.0]], 1);
        let f = exact_flow(&j, 32, 32, 2.0);
        assert!(f.slice0(0).data().iter().all(|&v| v == 0.0));
        for y in 8..15 {
            for x in 9..16 {
                assert_eq!(f.get(&[1, y, x, 0]), 2.5);
                assert_eq!(f.get(&[1, y, x, 1]), -1.0);
            }
        }
        // far corner is below the responsibility threshold
        assert_eq!(f.get(&[1, 31, 31, 0]), 0.0);
    }

    #[test]
    fn flow_partitions_by_dominant_blob() {
        let j = track(&[[8.0, 8.0], [22.0, 9.0], [9.0, 7.0], [21.0, 11.0]], 2);
        let f = exact_flow(&j, 20, 30, 2.0);
        let moves = [[1.0, -1.0], [-1.0, 2.0]];
        let cur = [[9.0, 7.0], [21.0, 11.0]];
        for y in 0..20 {
            for x in 0..30 {
                let r: Vec<f64> = cur
                    .iter()
                    .map(|c| (-((x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2)) / 8.0).exp())
                    .collect();
                let want = if r[0].max(r[1]) < RESPONSIBILITY_EPS {
                    [0.0, 0.0]
                } else if r[1] >= r[0] {
                    moves[1]
                } else {
                    moves[0]
                };
                assert_eq!([f.get(&[1, y, x, 0]), f.get(&[1, y, x, 1])], want, "pixel ({x}, {y})");
            }
        }
    }

    #[test]
    fn colors_are_distinct_and_saturated() {
        for a in 0..24 {
            let c = joint_color(a);
            assert_eq!(c.iter().cloned().fold(f64::MIN, f64::max), 1.0);
            for b in 0..a {
                assert_ne!(c, joint_color(b));
            }
        }
    }
}
