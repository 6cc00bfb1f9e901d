//! Shape blendshapes, forward kinematics and linear blend skinning.

use flowpose_tensor::{Graph, Tensor, Var};
use nalgebra::{Matrix3, Vector3};

use super::projection::Camera;
use super::rotation::{axis_angle_to_matrix, matrix_to_rot6d, rot6d_to_matrix};
use super::template::{BodyTemplate, NUM_BETAS};
use crate::error::{Error, Result};

/// Length of the flattened parameter vector: 24 rotations in 6D, 10 shape
/// coefficients and 3 camera values.
pub const PARAM_DIM: usize = 24 * 6 + NUM_BETAS + 3;

/// Per-joint rotations, tagged by representation.
#[derive(Clone, Debug, PartialEq)]
pub enum Pose {
    AxisAngle(Vec<[f64; 3]>),
    Rot6d(Vec<[f64; 6]>),
}

impl Pose {
    pub fn num_joints(&self) -> usize {
        match self {
            Pose::AxisAngle(v) => v.len(),
            Pose::Rot6d(v) => v.len(),
        }
    }

    pub fn rotations(&self) -> Result<Vec<Matrix3<f64>>> {
        match self {
            Pose::AxisAngle(v) => Ok(v.iter().map(|&a| axis_angle_to_matrix(a)).collect()),
            Pose::Rot6d(v) => v.iter().map(|&r| rot6d_to_matrix(r)).collect(),
        }
    }

    pub fn identity(joints: usize) -> Self {
        Pose::AxisAngle(vec![[0.0; 3]; joints])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmplParams {
    pub pose: Pose,
    pub shape: [f64; NUM_BETAS],
    pub camera: Camera,
}

impl SmplParams {
    pub fn rest(joints: usize) -> Self {
        Self {
            pose: Pose::identity(joints),
            shape: [0.0; NUM_BETAS],
            camera: Camera::new(1.0, 0.0, 0.0),
        }
    }

    /// `rot6d ‖ β ‖ (s, tx, ty)`, length [`PARAM_DIM`] for 24 joints.
    pub fn to_vector(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(PARAM_DIM);
        for r in self.pose.rotations()? {
            out.extend(matrix_to_rot6d(&r));
        }
        out.extend(self.shape);
        out.extend(self.camera.to_array());
        Ok(out)
    }

    /// Inverse of [`SmplParams::to_vector`].
    pub fn from_vector(v: &[f64], joints: usize) -> Result<Self> {
        let want = joints * 6 + NUM_BETAS + 3;
        if v.len() != want {
            return Err(Error::shape("SmplParams::from_vector", &[want], &[v.len()]));
        }
        let pose = v[..joints * 6]
            .chunks(6)
            .map(|c| c.try_into().unwrap())
            .collect();
        let b = joints * 6;
        let camera = Camera::new(v[b + NUM_BETAS], v[b + NUM_BETAS + 1], v[b + NUM_BETAS + 2]);
        if camera.scale <= 0.0 {
            return Err(Error::Config(format!("camera scale must be positive, got {}", camera.scale)));
        }
        Ok(Self {
            pose: Pose::Rot6d(pose),
            shape: v[b..b + NUM_BETAS].try_into().unwrap(),
            camera,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeshResult {
    /// `[V, 3]`
    pub vertices: Tensor,
    /// `[K, 3]`
    pub joints3d: Tensor,
    /// Per-joint rest-to-posed transforms.
    pub joint_transforms: Vec<RigidTransform>,
}

/// Rest vertices displaced by the shape blendshapes, `[V, 3]`.
pub fn shape_mesh(tpl: &BodyTemplate, shape: &[f64; NUM_BETAS]) -> Tensor {
    let basis = tpl.shape_basis.data();
    let mut out = tpl.rest_vertices.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let row = &basis[i * NUM_BETAS..(i + 1) * NUM_BETAS];
        *v += row.iter().zip(shape).map(|(b, s)| b * s).sum::<f64>();
    }
    out
}

/// Joint locations regressed from a `[V, 3]` mesh.
pub fn regress_joints(tpl: &BodyTemplate, vertices: &Tensor) -> Vec<Vector3<f64>> {
    let v = tpl.num_vertices();
    (0..tpl.num_joints())
        .map(|j| {
            let w = &tpl.joint_regressor.data()[j * v..(j + 1) * v];
            let mut acc = Vector3::zeros();
            for (i, &wi) in w.iter().enumerate() {
                if wi != 0.0 {
                    acc += wi * Vector3::new(vertices.get(&[i, 0]), vertices.get(&[i, 1]), vertices.get(&[i, 2]));
                }
            }
            acc
        })
        .collect()
}

/// Chain per-joint local rotations along the kinematic tree. Each returned
/// transform maps rest-pose coordinates to posed coordinates for points
/// rigidly attached to that joint.
pub fn forward_kinematics(
    tpl: &BodyTemplate,
    rest_joints: &[Vector3<f64>],
    rotations: &[Matrix3<f64>],
) -> Vec<RigidTransform> {
    let mut out: Vec<RigidTransform> = Vec::with_capacity(tpl.num_joints());
    for (j, parent) in tpl.parents.iter().enumerate() {
        // rotation about the rest joint location
        let local = RigidTransform {
            rotation: rotations[j],
            translation: rest_joints[j] - rotations[j] * rest_joints[j],
        };
        out.push(match parent {
            None => local,
            Some(p) => out[*p].compose(&local),
        });
    }
    out
}

/// Linear blend skinning of `[V, 3]` rest vertices with the per-joint
/// transforms from [`forward_kinematics`].
pub fn linear_blend_skinning(tpl: &BodyTemplate, vertices: &Tensor, transforms: &[RigidTransform]) -> Tensor {
    let k = tpl.num_joints();
    let mut out = Vec::with_capacity(vertices.numel());
    for (i, v) in vertices.data().chunks(3).enumerate() {
        let v = Vector3::new(v[0], v[1], v[2]);
        let w = &tpl.skin_weights.data()[i * k..(i + 1) * k];
        let mut rot = Matrix3::zeros();
        let mut tr = Vector3::zeros();
        for (j, &wj) in w.iter().enumerate() {
            if wj != 0.0 {
                rot += transforms[j].rotation * wj;
                tr += transforms[j].translation * wj;
            }
        }
        let p = rot * v + tr;
        out.extend([p.x, p.y, p.z]);
    }
    Tensor::from_vec(vertices.shape(), out)
}

/// Posed mesh and joints for one frame.
pub fn forward(tpl: &BodyTemplate, params: &SmplParams) -> Result<MeshResult> {
    let k = tpl.num_joints();
    if params.pose.num_joints() != k {
        return Err(Error::Representation(format!(
            "pose has {} joints, template has {k}",
            params.pose.num_joints()
        )));
    }
    let rotations = params.pose.rotations()?;
    let shaped = shape_mesh(tpl, &params.shape);
    let rest_joints = regress_joints(tpl, &shaped);
    let mut posed_rest = shaped.clone();
    if let Some(pb) = &tpl.pose_basis {
        let feat: Vec<f64> = rotations[1..]
            .iter()
            .flat_map(|r| {
                let d = r - Matrix3::identity();
                // row-major flattening
                (0..9).map(move |i| d[(i / 3, i % 3)])
            })
            .collect();
        let p = feat.len();
        for (i, v) in posed_rest.data_mut().iter_mut().enumerate() {
            let row = &pb.data()[i * p..(i + 1) * p];
            *v += row.iter().zip(&feat).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let transforms = forward_kinematics(tpl, &rest_joints, &rotations);
    let vertices = linear_blend_skinning(tpl, &posed_rest, &transforms);
    let joints3d = Tensor::from_vec(
        &[k, 3],
        transforms
            .iter()
            .zip(&rest_joints)
            .flat_map(|(t, j)| {
                let p = t.apply(*j);
                [p.x, p.y, p.z]
            })
            .collect(),
    );
    Ok(MeshResult {
        vertices,
        joints3d,
        joint_transforms: transforms,
    })
}

/// Template-derived constants for the differentiable joint path.
#[derive(Clone, Debug)]
pub struct JointModel {
    parents: Vec<Option<usize>>,
    /// `[10, K * 3]`: joint displacement per shape coefficient.
    shape_to_joints: Tensor,
    /// `[K * 3]`: rest joints at zero shape.
    rest_joints: Tensor,
    /// `[K, K]`: maps joints to offsets from their parent (root kept).
    offsets: Tensor,
}

impl JointModel {
    pub fn new(tpl: &BodyTemplate) -> Self {
        let k = tpl.num_joints();
        let v = tpl.num_vertices();
        let jr = tpl.joint_regressor.data();
        let mut s2j = vec![0.0; NUM_BETAS * k * 3];
        let mut rest = vec![0.0; k * 3];
        for j in 0..k {
            for i in 0..v {
                let w = jr[j * v + i];
                if w == 0.0 {
                    continue;
                }
                for a in 0..3 {
                    rest[j * 3 + a] += w * tpl.rest_vertices.get(&[i, a]);
                    for b in 0..NUM_BETAS {
                        s2j[b * k * 3 + j * 3 + a] += w * tpl.shape_basis.get(&[i, a, b]);
                    }
                }
            }
        }
        let mut offsets = Tensor::eye(k);
        for (j, p) in tpl.parents.iter().enumerate() {
            if let Some(p) = p {
                offsets.set(&[j, *p], -1.0);
            }
        }
        Self {
            parents: tpl.parents.clone(),
            shape_to_joints: Tensor::from_vec(&[NUM_BETAS, k * 3], s2j),
            rest_joints: Tensor::from_vec(&[k * 3], rest),
            offsets,
        }
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    /// Posed joints `[N, K, 3]` from rotations `[N, K, 3, 3]` and shape
    /// coefficients `[N, 10]`.
    pub fn joints(&self, g: &mut Graph, rotations: Var, shape: Var) -> Var {
        let k = self.num_joints();
        let n = g.shape(rotations)[0];
        assert_eq!(g.shape(rotations), [n, k, 3, 3], "rotations must be [N, K, 3, 3]");
        assert_eq!(g.shape(shape), [n, NUM_BETAS], "shape must be [N, 10]");
        let s2j = g.constant(self.shape_to_joints.clone());
        let rest = g.constant(self.rest_joints.clone());
        let offsets = g.constant(self.offsets.clone());
        let disp = g.matmul(shape, s2j);
        let rest_joints = g.add(disp, rest);
        let rest_joints = g.reshape(rest_joints, &[n, k, 3]);
        let rel = g.matmul(offsets, rest_joints);

        let mut world_rot: Vec<Var> = Vec::with_capacity(k);
        let mut world_pos: Vec<Var> = Vec::with_capacity(k);
        for j in 0..k {
            let r = g.narrow(rotations, 1, j, 1);
            let r = g.reshape(r, &[n, 3, 3]);
            let o = g.narrow(rel, 1, j, 1);
            let o = g.reshape(o, &[n, 3, 1]);
            match self.parents[j] {
                None => {
                    world_rot.push(r);
                    world_pos.push(o);
                }
                Some(p) => {
                    let rot = g.matmul(world_rot[p], r);
                    let step = g.matmul(world_rot[p], o);
                    let pos = g.add(world_pos[p], step);
                    world_rot.push(rot);
                    world_pos.push(pos);
                }
            }
        }
        let cols: Vec<Var> = world_pos.iter().map(|&p| g.reshape(p, &[n, 1, 3])).collect();
        g.concat(&cols, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::rotation::{matrix_to_axis_angle, rot6d_to_matrix_var};
    use flowpose_tensor::gradcheck::GradCheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, k: usize, amp: f64) -> SmplParams {
        SmplParams {
            pose: Pose::AxisAngle((0..k).map(|_| std::array::from_fn(|_| rng.random_range(-amp..amp))).collect()),
            shape: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            camera: Camera::new(1.0, 0.0, 0.0),
        }
    }

    #[test]
    fn zero_shape_is_the_rest_mesh() {
        let t = BodyTemplate::toy();
        assert_eq!(shape_mesh(&t, &[0.0; 10]), t.rest_vertices);
    }

    #[test]
    fn shape_blendshapes_are_linear() {
        let t = BodyTemplate::toy();
        let b0 = [0.3, -0.2, 0.5, 0.1, 0.0, -0.4, 0.2, 0.9, -0.7, 0.05];
        let b2: [f64; 10] = std::array::from_fn(|i| 2.0 * b0[i]);
        let d1 = shape_mesh(&t, &b0).zip_map(&t.rest_vertices, |a, b| a - b);
        let d2 = shape_mesh(&t, &b2).zip_map(&t.rest_vertices, |a, b| a - b);
        assert!(d2.max_abs_diff(&d1.map(|x| 2.0 * x)) < 1e-14);
    }

    #[test]
    fn shape_mesh_matches_loop_over_basis_slices() {
        let t = BodyTemplate::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let beta: [f64; 10] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let mut want = t.rest_vertices.clone();
        for b in 0..10 {
            for v in 0..t.num_vertices() {
                for a in 0..3 {
                    let cur = want.get(&[v, a]);
                    want.set(&[v, a], cur + t.shape_basis.get(&[v, a, b]) * beta[b]);
                }
            }
        }
        assert!(shape_mesh(&t, &beta).max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn zero_pose_and_shape_reproduce_the_template() {
        let t = BodyTemplate::toy();
        let m = forward(&t, &SmplParams::rest(24)).unwrap();
        assert_eq!(m.vertices, t.rest_vertices);
        let rest = regress_joints(&t, &t.rest_vertices);
        for j in 0..24 {
            for a in 0..3 {
                assert_eq!(m.joints3d.get(&[j, a]), rest[j][a]);
            }
        }
    }

    #[test]
    fn root_rotation_moves_the_body_rigidly() {
        let t = BodyTemplate::toy();
        let aa = [0.4, -1.2, 0.3];
        let r = axis_angle_to_matrix(aa);
        let mut pose = vec![[0.0; 3]; 24];
        pose[0] = aa;
        let p = SmplParams { pose: Pose::AxisAngle(pose), ..SmplParams::rest(24) };
        let m = forward(&t, &p).unwrap();
        let rest = regress_joints(&t, &t.rest_vertices);
        for j in 0..24 {
            let want = r * (rest[j] - rest[0]) + rest[0];
            for a in 0..3 {
                assert!((m.joints3d.get(&[j, a]) - want[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn common_rigid_motion_of_all_transforms_moves_vertices_rigidly() {
        let t = BodyTemplate::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = random_params(&mut rng, 24, 0.6);
        let shaped = shape_mesh(&t, &p.shape);
        let rest = regress_joints(&t, &shaped);
        let transforms = forward_kinematics(&t, &rest, &p.pose.rotations().unwrap());
        let base = linear_blend_skinning(&t, &shaped, &transforms);
        let gmove = RigidTransform {
            rotation: axis_angle_to_matrix([0.3, 0.9, -0.4]),
            translation: Vector3::new(0.5, -1.0, 2.0),
        };
        let moved: Vec<_> = transforms.iter().map(|x| gmove.compose(x)).collect();
        let out = linear_blend_skinning(&t, &shaped, &moved);
        for (a, b) in base.data().chunks(3).zip(out.data().chunks(3)) {
            let want = gmove.apply(Vector3::new(a[0], a[1], a[2]));
            for i in 0..3 {
                assert!((b[i] - want[i]).abs() < 1e-12);
            }
        }
    }

    /// Three-joint chain 0 -> 1 -> 2 with hand-placed vertices.
    fn chain_template() -> BodyTemplate {
        let rest = Tensor::from_vec(&[6, 3], vec![
            0.0, 0.0, 0.0, 0.1, 0.0, 0.0,
            1.0, 0.0, 0.0, 1.0, 0.1, 0.0,
            2.0, 0.0, 0.0, 2.0, 0.0, 0.1,
        ]);
        let mut jr = Tensor::zeros(&[3, 6]);
        jr.set(&[0, 0], 1.0);
        jr.set(&[1, 2], 1.0);
        jr.set(&[2, 4], 1.0);
        let skin = Tensor::from_vec(&[6, 3], vec![
            1.0, 0.0, 0.0, 0.7, 0.3, 0.0,
            0.0, 1.0, 0.0, 0.0, 0.5, 0.5,
            0.0, 0.0, 1.0, 0.2, 0.0, 0.8,
        ]);
        let basis = Tensor::from_fn(&[6, 3, 10], |i| ((i * 7) % 5) as f64 * 0.01);
        BodyTemplate {
            rest_vertices: rest,
            shape_basis: basis,
            joint_regressor: jr,
            skin_weights: skin,
            parents: vec![None, Some(0), Some(1)],
            pose_basis: None,
        }
    }

    #[test]
    fn chain_skinning_matches_explicit_transform_accumulation() {
        let t = chain_template();
        t.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let p = random_params(&mut rng, 3, 1.5);
            let m = forward(&t, &p).unwrap();
            let r = p.pose.rotations().unwrap();
            let shaped = shape_mesh(&t, &p.shape);
            let vtx = |i: usize| Vector3::new(shaped.get(&[i, 0]), shaped.get(&[i, 1]), shaped.get(&[i, 2]));
            let (j0, j1, j2) = (vtx(0), vtx(2), vtx(4));
            // Explicit homogeneous chain: A_k = G_k * T(-j_k).
            let g0 = |x: Vector3<f64>| r[0] * (x - j0) + j0;
            let g1 = |x: Vector3<f64>| r[0] * (r[1] * (x - j1) + (j1 - j0)) + j0;
            let g2 = |x: Vector3<f64>| r[0] * (r[1] * (r[2] * (x - j2) + (j2 - j1)) + (j1 - j0)) + j0;
            for i in 0..6 {
                let x = vtx(i);
                let w = [t.skin_weights.get(&[i, 0]), t.skin_weights.get(&[i, 1]), t.skin_weights.get(&[i, 2])];
                let want = g0(x) * w[0] + g1(x) * w[1] + g2(x) * w[2];
                for a in 0..3 {
                    assert!((m.vertices.get(&[i, a]) - want[a]).abs() < 1e-12);
                }
            }
            let joints = [g0(j0), g1(j1), g2(j2)];
            for (j, want) in joints.iter().enumerate() {
                for a in 0..3 {
                    assert!((m.joints3d.get(&[j, a]) - want[a]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn graph_joints_match_plain_forward() {
        let t = BodyTemplate::toy();
        let jm = JointModel::new(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let params: Vec<SmplParams> = (0..3).map(|_| random_params(&mut rng, 24, 0.8)).collect();
        let rot = Tensor::from_vec(
            &[3, 24, 3, 3],
            params
                .iter()
                .flat_map(|p| p.pose.rotations().unwrap())
                .flat_map(|m| (0..9).map(move |i| m[(i / 3, i % 3)]))
                .collect(),
        );
        let shape = Tensor::from_vec(&[3, 10], params.iter().flat_map(|p| p.shape).collect());
        let mut g = Graph::inference();
        let (r, s) = (g.constant(rot), g.constant(shape));
        let j = jm.joints(&mut g, r, s);
        for (n, p) in params.iter().enumerate() {
            let want = forward(&t, p).unwrap().joints3d;
            assert!(g.value(j).slice0(n).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let t = BodyTemplate::toy();
        let jm = JointModel::new(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let r6 = Tensor::from_fn(&[2, 24, 6], |_| rng.random_range(-1.0..1.0));
        let beta = Tensor::from_fn(&[2, 10], |_| rng.random_range(-1.0..1.0));
        let weights = Tensor::from_fn(&[2, 24, 3], |i| ((i as f64) * 0.31).sin());
        let report = GradCheck::default().run(&[r6, beta], |g, v| {
            let rot = rot6d_to_matrix_var(g, v[0]);
            let j = jm.joints(g, rot, v[1]);
            let w = g.constant(weights.clone());
            let p = g.mul(j, w);
            g.sum(p)
        });
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn params_vector_layout_is_157() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let p = random_params(&mut rng, 24, 1.0);
        let v = p.to_vector().unwrap();
        assert_eq!(v.len(), PARAM_DIM);
        assert_eq!(PARAM_DIM, 24 * 6 + 10 + 3);
        let back = SmplParams::from_vector(&v, 24).unwrap();
        let (ra, rb) = (p.pose.rotations().unwrap(), back.pose.rotations().unwrap());
        for (a, b) in ra.iter().zip(&rb) {
            assert!((a - b).abs().max() < 1e-12);
            let _ = matrix_to_axis_angle(a);
        }
        assert_eq!(back.shape, p.shape);
    }
}
