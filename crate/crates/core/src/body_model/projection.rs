use flowpose_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Weak-perspective camera: `x2d = scale * (x, y) + (tx, ty)`, depth dropped.
/// Image coordinates are normalised to `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Camera {
    pub fn new(scale: f64, tx: f64, ty: f64) -> Self {
        Self { scale, tx, ty }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.scale, self.tx, self.ty]
    }

    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        [self.scale * p[0] + self.tx, self.scale * p[1] + self.ty]
    }
}

/// Project `[N, 3]` points to `[N, 2]` normalised image coordinates.
pub fn project_weak_perspective(points: &Tensor, camera: Camera) -> Tensor {
    assert_eq!(points.shape().last(), Some(&3), "points must be [.., 3]");
    let mut shape = points.shape().to_vec();
    *shape.last_mut().unwrap() = 2;
    let data = points
        .data()
        .chunks(3)
        .flat_map(|p| camera.project([p[0], p[1], p[2]]))
        .collect();
    Tensor::from_vec(&shape, data)
}

/// Differentiable projection of `[N, J, 3]` points with per-row cameras
/// `[N, 3]` (`scale, tx, ty`), giving `[N, J, 2]`.
pub fn project_var(g: &mut Graph, points: Var, camera: Var) -> Var {
    let n = g.shape(points)[0];
    let xy = g.narrow(points, 2, 0, 2);
    let s = g.narrow(camera, 1, 0, 1);
    let s = g.reshape(s, &[n, 1, 1]);
    let t = g.narrow(camera, 1, 1, 2);
    let t = g.reshape(t, &[n, 1, 2]);
    let scaled = g.mul(xy, s);
    g.add(scaled, t)
}

/// Normalised coordinate to pixel coordinate, with pixel centres on the
/// integers `0..size`.
pub fn to_pixels(u: f64, size: usize) -> f64 {
    (u + 1.0) * size as f64 / 2.0 - 0.5
}

/// Inverse of [`to_pixels`].
pub fn to_normalized(p: f64, size: usize) -> f64 {
    (p + 0.5) * 2.0 / size as f64 - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_camera_drops_depth() {
        let p = Tensor::from_vec(&[1, 3], vec![0.3, -0.2, 5.0]);
        let out = project_weak_perspective(&p, Camera::new(1.0, 0.0, 0.0));
        assert_eq!(out.data(), &[0.3, -0.2]);
    }

    #[test]
    fn projection_is_depth_invariant() {
        let cam = Camera::new(2.0, 0.1, 0.1);
        for z in [-3.0, 0.0, 7.5] {
            let p = Tensor::from_vec(&[1, 3], vec![1.0, 1.0, z]);
            let out = project_weak_perspective(&p, cam);
            assert!((out.data()[0] - 2.1).abs() < 1e-15);
            assert!((out.data()[1] - 2.1).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_projection_matches_scalar_loop() {
        let pts = Tensor::from_fn(&[17, 3], |i| (i as f64 * 0.37).sin());
        let cam = Camera::new(0.8, -0.05, 0.2);
        let out = project_weak_perspective(&pts, cam);
        for i in 0..17 {
            let x = 0.8 * pts.get(&[i, 0]) - 0.05;
            let y = 0.8 * pts.get(&[i, 1]) + 0.2;
            assert_eq!(out.get(&[i, 0]), x);
            assert_eq!(out.get(&[i, 1]), y);
        }
    }

    #[test]
    fn graph_projection_matches_plain() {
        let pts = Tensor::from_fn(&[2, 5, 3], |i| (i as f64 * 0.61).cos());
        let cams = Tensor::from_vec(&[2, 3], vec![0.9, 0.1, -0.2, 1.3, 0.0, 0.05]);
        let mut g = Graph::inference();
        let (p, c) = (g.constant(pts.clone()), g.constant(cams.clone()));
        let out = project_var(&mut g, p, c);
        for n in 0..2 {
            let cam = Camera::new(cams.get(&[n, 0]), cams.get(&[n, 1]), cams.get(&[n, 2]));
            let want = project_weak_perspective(&pts.slice0(n), cam);
            assert!(g.value(out).slice0(n).max_abs_diff(&want) < 1e-15);
        }
    }

    #[test]
    fn pixel_conversion_round_trips() {
        for u in [-1.0, -0.3, 0.0, 0.77, 1.0] {
            assert!((to_normalized(to_pixels(u, 64), 64) - u).abs() < 1e-15);
        }
        assert_eq!(to_pixels(-1.0, 64), -0.5);
        assert_eq!(to_pixels(1.0, 64), 63.5);
    }
}
