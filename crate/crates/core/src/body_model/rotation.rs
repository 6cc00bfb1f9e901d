//! Rotation representations: axis-angle, rotation matrices and the
//! continuous 6D form (first two matrix columns).

use flowpose_tensor::{Graph, Tensor, Var};
use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};

/// Rodrigues formula. Falls back to the second-order series near zero.
pub fn axis_angle_to_matrix(aa: [f64; 3]) -> Matrix3<f64> {
    let v = Vector3::from(aa);
    let theta2 = v.norm_squared();
    let k = Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0);
    let (a, b) = if theta2 < 1e-12 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Inverse of [`axis_angle_to_matrix`], angle in `[0, π]`.
pub fn matrix_to_axis_angle(m: &Matrix3<f64>) -> [f64; 3] {
    let r = Rotation3::from_matrix_unchecked(*m);
    let v = r.scaled_axis();
    [v.x, v.y, v.z]
}

/// 6D layout: `[c0x, c0y, c0z, c1x, c1y, c1z]` for columns `c0`, `c1`.
pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> [f64; 6] {
    [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
}

/// Gram–Schmidt orthonormalisation of the two 3-vectors in `r`.
pub fn rot6d_to_matrix(r: [f64; 6]) -> Result<Matrix3<f64>> {
    let a1 = Vector3::new(r[0], r[1], r[2]);
    let a2 = Vector3::new(r[3], r[4], r[5]);
    let (n1, n2) = (a1.norm(), a2.norm());
    if n1 == 0.0 || n2 == 0.0 || a1.cross(&a2).norm() <= 1e-8 * n1 * n2 {
        return Err(Error::DegenerateRotation);
    }
    let b1 = a1 / n1;
    let b2 = (a2 - b1 * b1.dot(&a2)).normalize();
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Differentiable [`rot6d_to_matrix`] over a `[..., 6]` tensor, returning
/// `[..., 3, 3]`.
pub fn rot6d_to_matrix_var(g: &mut Graph, r: Var) -> Var {
    let shape = g.shape(r).to_vec();
    let lead = &shape[..shape.len() - 1];
    let n: usize = lead.iter().product();
    let flat = g.reshape(r, &[n, 6]);
    let a1 = g.narrow(flat, 1, 0, 3);
    let a2 = g.narrow(flat, 1, 3, 3);
    let b1 = normalize_rows(g, a1);
    let proj = dot_rows(g, b1, a2);
    let along = g.mul(proj, b1);
    let u = g.sub(a2, along);
    let b2 = normalize_rows(g, u);
    let b3 = g.cross(b1, b2);
    // Rows of the concatenation are the columns of the rotation.
    let cols = g.concat(&[b1, b2, b3], 1);
    let cols = g.reshape(cols, &[n, 3, 3]);
    let m = g.transpose(cols);
    let mut out = lead.to_vec();
    out.extend([3, 3]);
    g.reshape(m, &out)
}

fn dot_rows(g: &mut Graph, a: Var, b: Var) -> Var {
    let n = g.shape(a)[0];
    let p = g.mul(a, b);
    let s = g.sum_axis(p, 1);
    g.reshape(s, &[n, 1])
}

fn normalize_rows(g: &mut Graph, a: Var) -> Var {
    let sq = dot_rows(g, a, a);
    let norm = g.sqrt(sq);
    g.div(a, norm)
}

/// `[N, K, 3]` axis-angle tensor to `[N, K, 3, 3]` rotation matrices.
pub fn axis_angle_tensor_to_matrices(aa: &Tensor) -> Tensor {
    let s = aa.shape();
    assert_eq!(*s.last().unwrap(), 3, "axis-angle tensor must end in 3");
    let mut out = Vec::with_capacity(aa.numel() * 3);
    for v in aa.data().chunks(3) {
        let m = axis_angle_to_matrix([v[0], v[1], v[2]]);
        for i in 0..3 {
            for j in 0..3 {
                out.push(m[(i, j)]);
            }
        }
    }
    let mut shape = s.to_vec();
    shape.push(3);
    Tensor::from_vec(&shape, out)
}
