//! SMPL-lite parametric body: a procedurally generated template with the same
//! parameter layout as SMPL (23 articulated joints plus root, 10 shape
//! coefficients, 14 LSP output joints), differentiable skinning, joint
//! regression and weak-perspective projection.

mod model;
mod obj;
mod params;
mod template;

pub use model::{
    joints_for, project, project_vars, regress_joints, regress_joints_vars, rodrigues, skin,
    skin_vars, BodyMesh, MeshVars, ThetaVars, TemplateConsts,
};
pub use obj::export_obj;
pub use params::{ThetaParams, BETA_DIM, THETA_DIM};
pub use template::{
    build_template, BodyTemplate, JOINT_NAMES, LSP_JOINTS, LSP_NAMES, NUM_JOINTS, NUM_LSP,
    NUM_POSE_JOINTS, PARENTS,
};
