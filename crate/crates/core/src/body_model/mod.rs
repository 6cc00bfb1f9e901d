//! Parametric articulated body: shape blendshapes, forward kinematics,
//! linear blend skinning, joint regression, rotation representations and
//! weak-perspective projection.

pub mod kinematics;
pub mod projection;
pub mod rotation;
pub mod template;

pub use kinematics::{
    forward, forward_kinematics, linear_blend_skinning, regress_joints, shape_mesh, JointModel, MeshResult, Pose,
    RigidTransform, SmplParams, PARAM_DIM,
};
pub use projection::{project_var, project_weak_perspective, to_normalized, to_pixels, Camera};
pub use rotation::{axis_angle_to_matrix, matrix_to_axis_angle, matrix_to_rot6d, rot6d_to_matrix, rot6d_to_matrix_var};
pub use template::{BodyTemplate, JOINT_NAMES, NUM_BETAS, NUM_JOINTS, SMPL_PARENTS};
