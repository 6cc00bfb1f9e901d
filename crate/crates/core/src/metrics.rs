//! Evaluation metrics in millimetres, Procrustes alignment and attention
//! summaries.

use std::io::Write;

use flowpose_tensor::Tensor;
use nalgebra::{Matrix3, Vector3};
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::temporal_encoder::AttentionRecord;

/// The body model works in metres, metrics in millimetres.
pub const MM_PER_M: f64 = 1000.0;

fn check_points(op: &'static str, gt: &Tensor, pred: &Tensor) -> Result<()> {
    if gt.shape() != pred.shape() || gt.ndim() != 3 || gt.shape()[2] != 3 {
        return Err(Error::shape(op, gt.shape(), pred.shape()));
    }
    Ok(())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_dist(gt: &Tensor, pred: &Tensor) -> f64 {
    let n = gt.numel() / 3;
    if n == 0 {
        return 0.0;
    }
    gt.data().chunks(3).zip(pred.data().chunks(3)).map(|(a, b)| dist(a, b)).sum::<f64>() / n as f64
}

/// Subtract `root` (`[T, 3]`) from every point of `[T, N, 3]`.
pub fn center_on(points: &Tensor, root: &Tensor) -> Tensor {
    let n = points.shape()[1];
    Tensor::from_fn(points.shape(), |i| points.data()[i] - root.data()[(i / (3 * n)) * 3 + i % 3])
}

/// Subtract joint 0 from every joint of `[T, J, 3]`.
pub fn root_center(joints: &Tensor) -> Tensor {
    let t = joints.shape()[0];
    let root = Tensor::from_fn(&[t, 3], |i| joints.get(&[i / 3, 0, i % 3]));
    center_on(joints, &root)
}

/// Mean joint distance of root-centred `[T, J, 3]` joints.
pub fn mpjpe(gt: &Tensor, pred: &Tensor) -> Result<f64> {
    check_points("mpjpe", gt, pred)?;
    Ok(mean_dist(gt, pred))
}

/// Mean vertex distance of root-aligned `[T, V, 3]` meshes.
pub fn pve(gt_vertices: &Tensor, pred_vertices: &Tensor) -> Result<f64> {
    check_points("pve", gt_vertices, pred_vertices)?;
    Ok(mean_dist(gt_vertices, pred_vertices))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * p + self.translation
    }

    /// Apply to `[J, 3]` points.
    pub fn transform(&self, points: &Tensor) -> Tensor {
        let data = points
            .data()
            .chunks(3)
            .flat_map(|p| {
                let q = self.apply(Vector3::new(p[0], p[1], p[2]));
                [q.x, q.y, q.z]
            })
            .collect();
        Tensor::from_vec(points.shape(), data)
    }

    /// Sum of squared distances from the transformed `src` to `dst`.
    pub fn residual(&self, src: &Tensor, dst: &Tensor) -> f64 {
        let moved = self.transform(src);
        moved.data().iter().zip(dst.data()).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

fn rows(points: &Tensor) -> Vec<Vector3<f64>> {
    points.data().chunks(3).map(|p| Vector3::new(p[0], p[1], p[2])).collect()
}

/// Least-squares similarity transform taking `src` onto `dst` (both `[J, 3]`).
pub fn procrustes_align(src: &Tensor, dst: &Tensor) -> Result<Similarity> {
    if src.shape() != dst.shape() || src.ndim() != 2 || src.shape()[1] != 3 {
        return Err(Error::shape("procrustes_align", dst.shape(), src.shape()));
    }
    let (xs, ys) = (rows(src), rows(dst));
    let j = xs.len() as f64;
    let mu_x = xs.iter().sum::<Vector3<f64>>() / j;
    let mu_y = ys.iter().sum::<Vector3<f64>>() / j;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        let (dx, dy) = (x - mu_x, y - mu_y);
        cov += dy * dx.transpose();
        var_x += dx.norm_squared();
    }
    let svd = cov.svd(true, true);
    let sv = svd.singular_values;
    let tol = 1e-12 * sv.max().max(var_x).max(f64::MIN_POSITIVE);
    let rank = sv.iter().filter(|s| **s > tol).count();
    if rank < 2 || var_x <= f64::MIN_POSITIVE {
        return Err(Error::DegenerateConfiguration { rank });
    }
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = if (u * v_t).determinant() < 0.0 { -1.0 } else { 1.0 };
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = u * fix * v_t;
    // singular values come sorted, so the flip lands on the smallest
    let scale = (sv[0] + sv[1] + d * sv[2]) / var_x;
    let translation = mu_y - scale * rotation * mu_x;
    Ok(Similarity { scale, rotation, translation })
}

fn frames<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// MPJPE after aligning each predicted frame to ground truth.
pub fn pa_mpjpe(gt: &Tensor, pred: &Tensor) -> Result<f64> {
    check_points("pa_mpjpe", gt, pred)?;
    let (t, j) = (gt.shape()[0], gt.shape()[1]);
    let per_frame = frames(t, |i| -> Result<f64> {
        let (g, p) = (gt.slice0(i), pred.slice0(i));
        let aligned = procrustes_align(&p, &g)?.transform(&p);
        Ok(mean_dist(&g, &aligned))
    });
    let mut total = 0.0;
    for e in per_frame {
        total += e?;
    }
    Ok(if t * j == 0 { 0.0 } else { total / t as f64 })
}

/// Mean norm of the difference of second finite differences, in mm/s^2
/// for mm inputs.
pub fn accel_error(gt: &Tensor, pred: &Tensor, fps: f64) -> Result<f64> {
    check_points("accel_error", gt, pred)?;
    let (t, j) = (gt.shape()[0], gt.shape()[1]);
    if t < 3 {
        return Err(Error::TooShort { op: "accel_error", min: 3, got: t });
    }
    let stride = j * 3;
    let (g, p) = (gt.data(), pred.data());
    let mut total = 0.0;
    for ti in 1..t - 1 {
        for ji in 0..j {
            let mut sq = 0.0;
            for a in 0..3 {
                let at = |d: &[f64], tt: usize| d[tt * stride + ji * 3 + a];
                let ag = at(g, ti + 1) - 2.0 * at(g, ti) + at(g, ti - 1);
                let ap = at(p, ti + 1) - 2.0 * at(p, ti) + at(p, ti - 1);
                sq += ((ag - ap) * fps * fps).powi(2);
            }
            total += sq.sqrt();
        }
    }
    Ok(total / ((t - 2) * j) as f64)
}

/// Per-head mean of the first-layer attention maps, `[h, T, T]`.
pub fn attention_summary(records: &[AttentionRecord]) -> Result<Tensor> {
    let first = records.first().ok_or_else(|| Error::shape("attention_summary", &[1], &[0]))?;
    let s = first.weights.shape().to_vec();
    let (h, t) = (s[1], s[2]);
    let mut acc = vec![0.0; h * t * t];
    for r in records {
        if r.weights.shape() != s.as_slice() {
            return Err(Error::shape("attention_summary", &s, r.weights.shape()));
        }
        for (a, w) in acc.iter_mut().zip(&r.weights.data()[..h * t * t]) {
            *a += w;
        }
    }
    let n = records.len() as f64;
    Ok(Tensor::from_vec(&[h, t, t], acc.into_iter().map(|a| a / n).collect()))
}

/// Whitespace-separated `[T, T]` grid, one row per line.
pub fn format_grid(map: &Tensor) -> String {
    let t = map.shape()[1];
    let mut out = String::new();
    for row in map.data().chunks(t) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

/// Binary PGM of a `[T, T]` map, `cell` pixels per entry; lighter means
/// larger, scaled to the map's maximum.
pub fn write_pgm<W: Write>(mut w: W, map: &Tensor, cell: usize) -> std::io::Result<()> {
    let (rows, cols) = (map.shape()[0], map.shape()[1]);
    let cell = cell.max(1);
    let max = map.data().iter().cloned().fold(0.0, f64::max);
    write!(w, "P5\n{} {}\n255\n", cols * cell, rows * cell)?;
    for r in 0..rows * cell {
        let line: Vec<u8> = (0..cols * cell)
            .map(|c| {
                let v = map.get(&[r / cell, c / cell]);
                if max > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 }
            })
            .collect();
        w.write_all(&line)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], r: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-r..r))
    }

    pub(crate) fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
    }

    #[test]
    fn mpjpe_examples_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = rand_t(&mut rng, &[3, 5, 3], 100.0);
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
        let a = Tensor::from_vec(&[1, 1, 3], vec![0.0, 0.0, 0.0]);
        let b = Tensor::from_vec(&[1, 1, 3], vec![0.0, 10.0, 0.0]);
        assert_eq!(mpjpe(&a, &b).unwrap(), 10.0);
        let pred = rand_t(&mut rng, &[3, 5, 3], 100.0);
        let mut want = 0.0;
        for t in 0..3 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += (gt.get(&[t, j, k]) - pred.get(&[t, j, k])).powi(2);
                }
                want += s.sqrt();
            }
        }
        assert!((mpjpe(&gt, &pred).unwrap() - want / 15.0).abs() < 1e-12);
        assert!(mpjpe(&gt, &Tensor::zeros(&[3, 4, 3])).is_err());
    }

    #[test]
    fn pve_examples() {
        let a = Tensor::from_vec(&[1, 1, 3], vec![1.0, 2.0, 3.0]);
        let b = Tensor::from_vec(&[1, 1, 3], vec![1.0, 2.0, 8.0]);
        assert_eq!(pve(&a, &a).unwrap(), 0.0);
        assert_eq!(pve(&a, &b).unwrap(), 5.0);
        assert!(pve(&a, &Tensor::zeros(&[1, 2, 3])).is_err());
        let root = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]);
        assert_eq!(center_on(&a, &root).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn procrustes_exact_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = rand_t(&mut rng, &[14, 3], 1.0);
        let id = procrustes_align(&src, &src).unwrap();
        assert!((id.scale - 1.0).abs() < 1e-12);
        assert!((id.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(id.translation.norm() < 1e-12);
        for _ in 0..20 {
            let truth = Similarity {
                scale: rng.random_range(0.2..5.0),
                rotation: random_rotation(&mut rng),
                translation: Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0)),
            };
            let dst = truth.transform(&src);
            let got = procrustes_align(&src, &dst).unwrap();
            assert!((got.scale - truth.scale).abs() < 1e-9);
            assert!((got.rotation - truth.rotation).norm() < 1e-9);
            assert!((got.translation - truth.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn procrustes_never_reflects() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = rand_t(&mut rng, &[10, 3], 1.0);
        let mirrored = Tensor::from_fn(&[10, 3], |i| if i % 3 == 0 { -src.data()[i] } else { src.data()[i] });
        let s = procrustes_align(&src, &mirrored).unwrap();
        assert!((s.rotation.determinant() - 1.0).abs() < 1e-12);
        assert!((s.rotation.transpose() * s.rotation - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn procrustes_rejects_degenerate_sets() {
        let p = Tensor::from_fn(&[5, 3], |i| [1.0, 2.0, 3.0][i % 3]);
        assert!(matches!(procrustes_align(&p, &p), Err(Error::DegenerateConfiguration { .. })));
        let line = Tensor::from_fn(&[5, 3], |i| (i / 3) as f64 * [1.0, 2.0, 3.0][i % 3]);
        assert!(matches!(procrustes_align(&line, &line), Err(Error::DegenerateConfiguration { rank: 1 })));
    }

    /// Best residual among random similarity transforms.
    pub(crate) fn random_search(rng: &mut ChaCha8Rng, src: &Tensor, dst: &Tensor, n: usize) -> f64 {
        let mut best = f64::INFINITY;
        for _ in 0..n {
            let s = Similarity {
                scale: rng.random_range(0.1..3.0),
                rotation: random_rotation(rng),
                translation: Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
            };
            best = best.min(s.residual(src, dst));
        }
        best
    }

    #[test]
    fn procrustes_beats_random_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let src = rand_t(&mut rng, &[14, 3], 1.0);
            let dst = rand_t(&mut rng, &[14, 3], 1.0);
            let opt = procrustes_align(&src, &dst).unwrap().residual(&src, &dst);
            assert!(opt <= random_search(&mut rng, &src, &dst, 10_000) + 1e-12);
        }
    }

    #[test]
    fn pa_mpjpe_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = rand_t(&mut rng, &[4, 14, 3], 500.0);
        let s = Similarity { scale: 1.3, rotation: random_rotation(&mut rng), translation: Vector3::new(10.0, -4.0, 2.0) };
        let moved = Tensor::stack(&(0..4).map(|t| s.transform(&gt.slice0(t))).collect::<Vec<_>>()).unwrap();
        assert!(pa_mpjpe(&gt, &moved).unwrap() < 1e-9);
        let pred = rand_t(&mut rng, &[4, 14, 3], 500.0);
        let pa = pa_mpjpe(&gt, &pred).unwrap();
        assert!(pa <= mpjpe(&gt, &pred).unwrap());
        // alignment + loop oracle
        let mut want = 0.0;
        for t in 0..4 {
            let (g, p) = (gt.slice0(t), pred.slice0(t));
            let a = procrustes_align(&p, &g).unwrap();
            for j in 0..14 {
                let q = a.apply(Vector3::new(p.get(&[j, 0]), p.get(&[j, 1]), p.get(&[j, 2])));
                want += (q - Vector3::new(g.get(&[j, 0]), g.get(&[j, 1]), g.get(&[j, 2]))).norm();
            }
        }
        assert!((pa - want / 56.0).abs() < 1e-9);
    }

    #[test]
    fn accel_error_examples_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = rand_t(&mut rng, &[6, 3, 3], 50.0);
        assert_eq!(accel_error(&gt, &gt, 30.0).unwrap(), 0.0);
        let b = [1.0, -2.0, 0.5];
        let shifted = Tensor::from_fn(&[6, 3, 3], |i| gt.data()[i] + 4.0 + b[i % 3] * (i / 9) as f64);
        assert!(accel_error(&gt, &shifted, 30.0).unwrap() < 1e-9);
        let pred = rand_t(&mut rng, &[6, 3, 3], 50.0);
        let mut want = 0.0;
        for t in 1..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    let a = |x: &Tensor| (x.get(&[t + 1, j, k]) - 2.0 * x.get(&[t, j, k]) + x.get(&[t - 1, j, k])) * 900.0;
                    s += (a(&gt) - a(&pred)).powi(2);
                }
                want += s.sqrt();
            }
        }
        assert!((accel_error(&gt, &pred, 30.0).unwrap() - want / 12.0).abs() < 1e-9);
        assert!(matches!(accel_error(&gt.slice0(0).reshaped(&[1, 3, 3]), &gt.slice0(0).reshaped(&[1, 3, 3]), 30.0), Err(Error::TooShort { .. })));
    }

    fn record(rng: &mut ChaCha8Rng, l: usize, h: usize, t: usize) -> AttentionRecord {
        let mut w = rand_t(rng, &[l, h, t, t], 1.0).map(f64::exp);
        for row in w.data_mut().chunks_mut(t) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        AttentionRecord { weights: w }
    }

    #[test]
    fn attention_summary_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = record(&mut rng, 2, 3, 4);
        let one = attention_summary(std::slice::from_ref(&a)).unwrap();
        assert_eq!(one.data(), &a.weights.data()[..48]);
        let b = record(&mut rng, 2, 3, 4);
        let two = attention_summary(&[a.clone(), b.clone()]).unwrap();
        for h in 0..3 {
            for i in 0..4 {
                let mut row = 0.0;
                for j in 0..4 {
                    let want = (a.weights.get(&[0, h, i, j]) + b.weights.get(&[0, h, i, j])) / 2.0;
                    assert!((two.get(&[h, i, j]) - want).abs() < 1e-15);
                    row += two.get(&[h, i, j]);
                }
                assert!((row - 1.0).abs() < 1e-12);
            }
        }
        assert!(attention_summary(&[]).is_err());
        assert!(attention_summary(&[a, record(&mut rng, 2, 3, 5)]).is_err());
    }

    #[test]
    fn pgm_is_lighter_for_larger_values() {
        let m = Tensor::from_vec(&[2, 2], vec![0.0, 0.5, 1.0, 0.25]);
        let mut buf = Vec::new();
        write_pgm(&mut buf, &m, 2).unwrap();
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&buf[..header.len()], header);
        let px = &buf[header.len()..];
        assert_eq!(px.len(), 16);
        assert_eq!(&px[..4], &[0, 0, 128, 128]);
        assert_eq!(&px[8..12], &[255, 255, 64, 64]);
        assert_eq!(format_grid(&m), "0.000000 0.500000\n1.000000 0.250000\n");
    }
}
