//! Body templates: the procedural toy body and the `BT1` file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flowpose_tensor::Tensor;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::{self, ArraySet, FormatError, NamedArray};
use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 24;
pub const NUM_BETAS: usize = 10;
pub const TOY_VERTICES: usize = 128;
const MAGIC: &str = "BT1";

/// Parent of each joint in the standard 24-joint layout; the root is `None`.
pub const SMPL_PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
    Some(20),
    Some(21),
];

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2", "l_ankle",
    "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar", "r_collar", "head",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_hand", "r_hand",
];

/// Rest joint locations of the toy body in metres, y up, +x to the body's left.
const TOY_JOINTS: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.06, -0.09, 0.0],
    [-0.06, -0.09, 0.0],
    [0.0, 0.11, -0.01],
    [0.10, -0.47, 0.01],
    [-0.10, -0.47, 0.01],
    [0.0, 0.24, 0.0],
    [0.09, -0.87, -0.04],
    [-0.09, -0.87, -0.04],
    [0.0, 0.30, 0.01],
    [0.11, -0.93, 0.08],
    [-0.11, -0.93, 0.08],
    [0.0, 0.51, -0.02],
    [0.08, 0.42, -0.01],
    [-0.08, 0.42, -0.01],
    [0.0, 0.60, 0.03],
    [0.18, 0.45, -0.02],
    [-0.18, 0.45, -0.02],
    [0.44, 0.43, -0.03],
    [-0.44, 0.43, -0.03],
    [0.69, 0.44, -0.02],
    [-0.69, 0.44, -0.02],
    [0.78, 0.43, -0.02],
    [-0.78, 0.43, -0.02],
];

/// Ring radius around each joint of the toy body (metres).
const TOY_RADII: [f64; NUM_JOINTS] = [
    0.12, 0.08, 0.08, 0.11, 0.06, 0.06, 0.11, 0.045, 0.045, 0.12, 0.04, 0.04,
    0.06, 0.06, 0.06, 0.09, 0.055, 0.055, 0.045, 0.045, 0.035, 0.035, 0.04, 0.04,
];

/// Parametric articulated body.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyTemplate {
    /// `[V, 3]`
    pub rest_vertices: Tensor,
    /// `[V, 3, 10]`
    pub shape_basis: Tensor,
    /// `[K, V]`, rows sum to one.
    pub joint_regressor: Tensor,
    /// `[V, K]`, rows sum to one.
    pub skin_weights: Tensor,
    pub parents: Vec<Option<usize>>,
    /// Optional pose-corrective basis `[V, 3, 9 (K - 1)]`.
    pub pose_basis: Option<Tensor>,
}

impl BodyTemplate {
    pub fn num_vertices(&self) -> usize {
        self.rest_vertices.shape()[0]
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    /// Check the structural invariants: shapes, stochastic rows, and a
    /// parent table forming a tree rooted at joint 0.
    pub fn validate(&self) -> Result<()> {
        let v = self.num_vertices();
        let k = self.num_joints();
        let expect = |op, t: &Tensor, s: &[usize]| {
            if t.shape() != s {
                Err(Error::shape(op, s, t.shape()))
            } else {
                Ok(())
            }
        };
        expect("template rest_vertices", &self.rest_vertices, &[v, 3])?;
        expect("template shape_basis", &self.shape_basis, &[v, 3, NUM_BETAS])?;
        expect("template joint_regressor", &self.joint_regressor, &[k, v])?;
        expect("template skin_weights", &self.skin_weights, &[v, k])?;
        if let Some(p) = &self.pose_basis {
            expect("template pose_basis", p, &[v, 3, 9 * (k - 1)])?;
        }
        for (name, t, width) in [("skin_weights", &self.skin_weights, k), ("joint_regressor", &self.joint_regressor, v)] {
            for row in t.data().chunks(width) {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 || row.iter().any(|&w| w < 0.0) {
                    return Err(Error::Config(format!("{name} row is not a convex combination (sum {s})")));
                }
            }
        }
        if k == 0 || self.parents[0].is_some() {
            return Err(Error::Config("joint 0 must be the root".into()));
        }
        for (j, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => return Err(Error::Config(format!("joint {j} must have a parent with a smaller index"))),
            }
        }
        Ok(())
    }

    /// The procedural 24-joint, 128-vertex body.
    pub fn toy() -> Self {
        let k = NUM_JOINTS;
        let joints: Vec<Vector3<f64>> = TOY_JOINTS.iter().map(|j| Vector3::from(*j)).collect();
        let mut verts: Vec<Vector3<f64>> = Vec::with_capacity(TOY_VERTICES);
        let mut skin = vec![0.0; TOY_VERTICES * k];
        let mut regressor = vec![0.0; k * TOY_VERTICES];
        // which joint ring each vertex belongs to (None for bone midpoints)
        let mut ring_of: Vec<Option<usize>> = Vec::with_capacity(TOY_VERTICES);

        for j in 0..k {
            let dir = match SMPL_PARENTS[j] {
                Some(p) => (joints[j] - joints[p]).normalize(),
                None => Vector3::y(),
            };
            let helper = if dir.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
            let e1 = dir.cross(&helper).normalize();
            let e2 = dir.cross(&e1);
            let r = TOY_RADII[j];
            for off in [e1 * r, -e1 * r, e2 * r, -e2 * r] {
                let vi = verts.len();
                verts.push(joints[j] + off);
                ring_of.push(Some(j));
                regressor[j * TOY_VERTICES + vi] = 0.25;
                match SMPL_PARENTS[j] {
                    Some(p) => {
                        skin[vi * k + j] = 0.6;
                        skin[vi * k + p] = 0.4;
                    }
                    None => skin[vi * k + j] = 1.0,
                }
            }
            // surface point slightly beyond the joint along the bone
            let vi = verts.len();
            verts.push(joints[j] + dir * (0.5 * r) + e1 * (0.7 * r));
            ring_of.push(Some(j));
            skin[vi * k + j] = 1.0;
        }
        // midpoints of the long limb bones
        for j in [4, 5, 7, 8, 18, 19, 20, 21] {
            let p = SMPL_PARENTS[j].unwrap();
            let vi = verts.len();
            verts.push((joints[j] + joints[p]) * 0.5 + Vector3::new(0.0, 0.0, 0.03));
            ring_of.push(None);
            skin[vi * k + p] = 0.8;
            skin[vi * k + j] = 0.2;
        }
        assert_eq!(verts.len(), TOY_VERTICES);

        // Shape basis: five interpretable directions and five smooth fields.
        let mut basis = vec![0.0; TOY_VERTICES * 3 * NUM_BETAS];
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_b0d7);
        let waves: Vec<([f64; 3], [f64; 3], f64)> = (0..5)
            .map(|_| {
                let freq = std::array::from_fn(|_| rng.random_range(1.0..4.0));
                let dir = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                (freq, dir, rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        for (vi, v) in verts.iter().enumerate() {
            let mut set = |axis: usize, beta: usize, val: f64| {
                basis[(vi * 3 + axis) * NUM_BETAS + beta] = val;
            };
            set(1, 0, 0.08 * v.y);
            if let Some(j) = ring_of[vi] {
                let radial = v - joints[j];
                if radial.norm() > 0.0 {
                    let d = radial.normalize() * 0.02;
                    for a in 0..3 {
                        set(a, 1, d[a]);
                    }
                }
            }
            if v.x.abs() > 0.15 && v.y > 0.3 {
                set(0, 2, 0.06 * v.x);
            }
            if v.y < -0.09 {
                set(1, 3, 0.06 * (v.y + 0.09));
            }
            if v.x.abs() > 0.05 && v.y > 0.3 {
                set(0, 4, 0.02 * v.x.signum());
            }
            for (w, (freq, dir, phase)) in waves.iter().enumerate() {
                let s = (freq[0] * v.x + freq[1] * v.y + freq[2] * v.z + phase).sin() * 0.01;
                for a in 0..3 {
                    set(a, 5 + w, s * dir[a]);
                }
            }
        }

        let rest: Vec<f64> = verts.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        Self {
            rest_vertices: Tensor::from_vec(&[TOY_VERTICES, 3], rest),
            shape_basis: Tensor::from_vec(&[TOY_VERTICES, 3, NUM_BETAS], basis),
            joint_regressor: Tensor::from_vec(&[k, TOY_VERTICES], regressor),
            skin_weights: Tensor::from_vec(&[TOY_VERTICES, k], skin),
            parents: SMPL_PARENTS.to_vec(),
            pose_basis: None,
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        container::write_magic(w, MAGIC)?;
        let parents = Tensor::from_fn(&[self.num_joints()], |j| {
            self.parents[j].map_or(-1.0, |p| p as f64)
        });
        let mut arrays = vec![
            NamedArray::f64("rest_vertices", &self.rest_vertices),
            NamedArray::f64("shape_basis", &self.shape_basis),
            NamedArray::f64("joint_regressor", &self.joint_regressor),
            NamedArray::f64("skin_weights", &self.skin_weights),
            NamedArray::f64("parent", &parents),
        ];
        if let Some(p) = &self.pose_basis {
            arrays.push(NamedArray::f64("pose_basis", p));
        }
        container::write_u32(w, arrays.len() as u32)?;
        for a in &arrays {
            container::write_array(w, a)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        container::read_magic(r, MAGIC)?;
        let n = container::read_u32(r)?;
        let arrays = ArraySet((0..n).map(|_| container::read_array(r)).collect::<Result<_, FormatError>>()?);
        let parents = arrays
            .tensor("parent", None)?
            .data()
            .iter()
            .map(|&p| if p < 0.0 { None } else { Some(p as usize) })
            .collect();
        let tpl = Self {
            rest_vertices: arrays.tensor("rest_vertices", None)?,
            shape_basis: arrays.tensor("shape_basis", None)?,
            joint_regressor: arrays.tensor("joint_regressor", None)?,
            skin_weights: arrays.tensor("skin_weights", None)?,
            parents,
            pose_basis: arrays.optional("pose_basis").map(|a| a.to_tensor()).transpose()?,
        };
        tpl.validate()?;
        Ok(tpl)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_template_satisfies_invariants() {
        let t = BodyTemplate::toy();
        t.validate().unwrap();
        assert_eq!(t.num_vertices(), 128);
        assert_eq!(t.num_joints(), 24);
        assert!(t.num_vertices() >= t.num_joints());
    }

    #[test]
    fn regressed_rest_joints_sit_at_the_design_locations() {
        let t = BodyTemplate::toy();
        for j in 0..NUM_JOINTS {
            for a in 0..3 {
                let s: f64 = (0..TOY_VERTICES)
                    .map(|v| t.joint_regressor.get(&[j, v]) * t.rest_vertices.get(&[v, a]))
                    .sum();
                assert!((s - TOY_JOINTS[j][a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn file_round_trip_and_version_check() {
        let t = BodyTemplate::toy();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = BodyTemplate::read_from(&mut &buf[..]).unwrap();
        assert_eq!(back, t);
        buf[2] = b'9';
        assert!(matches!(
            BodyTemplate::read_from(&mut &buf[..]),
            Err(Error::Format(FormatError::VersionMismatch { .. }))
        ));
    }

    #[test]
    fn non_tree_parent_table_is_rejected() {
        let mut t = BodyTemplate::toy();
        t.parents[5] = Some(7);
        assert!(t.validate().is_err());
    }
}
