use std::sync::Arc;

use diffcore::rotation::{self, Mat3};
use diffcore::{BlendWeights, Graph, Tensor, Var};

use crate::body::params::{BETA_OFFSET, POSE_OFFSET, ROT_OFFSET, SCALE_OFFSET, TRANS_OFFSET};
use crate::body::{BodyTemplate, ThetaParams, BETA_DIM, NUM_JOINTS, NUM_LSP, NUM_POSE_JOINTS, THETA_DIM};
use crate::error::{Error, Result};

/// Positivity margin added to the softplus-mapped scale.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Posed mesh in the body frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyMesh {
    /// `[V, 3]`
    pub vertices: Vec<f64>,
    /// `[24, 3]`
    pub model_joints: Vec<f64>,
}

/// Template tensors recorded as graph constants.
pub struct TemplateConsts {
    template: Var,
    shape_dirs: Var,
    regressor: Var,
    rest: Vec<[f64; 3]>,
    parents: [Option<usize>; NUM_JOINTS],
    blend: Arc<BlendWeights>,
    vertex_count: usize,
}

impl TemplateConsts {
    pub fn new(g: &mut Graph, t: &BodyTemplate) -> Self {
        let nv = t.vertex_count();
        let tensor = |shape: Vec<usize>, data: &[f64]| Tensor::new(shape, data.to_vec()).expect("template shapes");
        Self {
            template: g.constant(tensor(vec![nv, 3], &t.template_vertices)),
            shape_dirs: g.constant(tensor(vec![nv * 3, BETA_DIM], &t.shape_dirs)),
            regressor: g.constant(tensor(vec![NUM_LSP, nv], &t.joint_regressor)),
            rest: (0..NUM_JOINTS).map(|j| t.rest_joint(j)).collect(),
            parents: t.parents,
            blend: Arc::new(BlendWeights::from_dense(nv, NUM_JOINTS, &t.skin_weights)),
            vertex_count: nv,
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }
}

/// Graph handles for the pieces of an 85-value parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct ThetaVars {
    /// `[23, 3]`
    pub pose: Var,
    /// `[10, 1]`
    pub beta: Var,
    /// `[3]`
    pub global_r: Var,
    /// `[2]`
    pub trans: Var,
    /// `[1]`
    pub scale: Var,
}

impl ThetaVars {
    /// Splits raw network output; the scale entry goes through
    /// `softplus(x) + SCALE_FLOOR`.
    pub fn from_raw(g: &mut Graph, raw: Var) -> Self {
        assert_eq!(g.value(raw).numel(), THETA_DIM, "raw theta must have {THETA_DIM} values");
        let pose = g.slice(raw, POSE_OFFSET, 3 * NUM_POSE_JOINTS);
        let pose = g.reshape(pose, &[NUM_POSE_JOINTS, 3]);
        let beta = g.slice(raw, BETA_OFFSET, BETA_DIM);
        let beta = g.reshape(beta, &[BETA_DIM, 1]);
        let global_r = g.slice(raw, ROT_OFFSET, 3);
        let trans = g.slice(raw, TRANS_OFFSET, 2);
        let s = g.slice(raw, SCALE_OFFSET, 1);
        let s = g.softplus(s);
        let scale = g.offset(s, SCALE_FLOOR);
        Self {
            pose,
            beta,
            global_r,
            trans,
            scale,
        }
    }

    /// Records `p` as differentiable leaves.
    pub fn from_params(g: &mut Graph, p: &ThetaParams) -> Self {
        let leaf = |g: &mut Graph, shape: Vec<usize>, data: Vec<f64>| g.input(Tensor::new(shape, data).expect("param shapes"));
        Self {
            pose: leaf(g, vec![NUM_POSE_JOINTS, 3], p.theta.iter().flatten().copied().collect()),
            beta: leaf(g, vec![BETA_DIM, 1], p.beta.to_vec()),
            global_r: leaf(g, vec![3], p.global_r.to_vec()),
            trans: leaf(g, vec![2], p.trans.to_vec()),
            scale: leaf(g, vec![1], vec![p.scale]),
        }
    }

    /// Reads the current values back into a [`ThetaParams`].
    pub fn to_params(&self, g: &Graph) -> ThetaParams {
        let mut p = ThetaParams::default();
        for (j, rot) in p.theta.iter_mut().enumerate() {
            rot.copy_from_slice(&g.data(self.pose)[3 * j..3 * j + 3]);
        }
        p.beta.copy_from_slice(g.data(self.beta));
        p.global_r.copy_from_slice(g.data(self.global_r));
        p.trans.copy_from_slice(g.data(self.trans));
        p.scale = g.data(self.scale)[0];
        p
    }
}

/// Graph handles of a skinned mesh.
#[derive(Debug, Clone, Copy)]
pub struct MeshVars {
    /// `[V, 3]`
    pub vertices: Var,
    /// `[24, 3]`
    pub joints: Var,
}

fn column(g: &mut Graph, v: [f64; 3]) -> Var {
    g.constant(Tensor::new(vec![3, 1], v.to_vec()).expect("3-vector"))
}

/// Shape blending, forward kinematics and linear blend skinning.
pub fn skin_vars(g: &mut Graph, c: &TemplateConsts, th: &ThetaVars) -> MeshVars {
    let nv = c.vertex_count;
    let offsets = g.matmul(c.shape_dirs, th.beta);
    let offsets = g.reshape(offsets, &[nv, 3]);
    let shaped = g.add(c.template, offsets);

    let local = g.rodrigues(th.pose);
    let mut world_r: Vec<Var> = Vec::with_capacity(NUM_JOINTS);
    let mut world_t: Vec<Var> = Vec::with_capacity(NUM_JOINTS);
    let mut affine: Vec<Var> = Vec::with_capacity(NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        let (r, t) = match c.parents[j] {
            None => {
                let r = g.constant(Tensor::new(vec![3, 3], rotation::IDENTITY.to_vec()).expect("3x3"));
                (r, column(g, c.rest[j]))
            }
            Some(p) => {
                let rl = g.slice(local, 9 * (j - 1), 9);
                let rl = g.reshape(rl, &[3, 3]);
                let r = g.matmul(world_r[p], rl);
                let bone = column(
                    g,
                    [c.rest[j][0] - c.rest[p][0], c.rest[j][1] - c.rest[p][1], c.rest[j][2] - c.rest[p][2]],
                );
                let rb = g.matmul(world_r[p], bone);
                (r, g.add(world_t[p], rb))
            }
        };
        let rest = column(g, c.rest[j]);
        let rj = g.matmul(r, rest);
        let shift = g.sub(t, rj);
        affine.push(g.concat_cols(&[r, shift]));
        world_r.push(r);
        world_t.push(t);
    }
    let transforms = g.concat(&affine);
    let transforms = g.reshape(transforms, &[NUM_JOINTS, 3, 4]);
    let vertices = g.linear_blend(transforms, shaped, c.blend.clone());
    let joints = g.concat(&world_t);
    let joints = g.reshape(joints, &[NUM_JOINTS, 3]);
    MeshVars { vertices, joints }
}

/// `J3d = regressor · vertices`, shape `[14, 3]`.
pub fn regress_joints_vars(g: &mut Graph, c: &TemplateConsts, vertices: Var) -> Var {
    g.matmul(c.regressor, vertices)
}

/// Weak-perspective projection `s · Π(R · J) + t` of `[n, 3]` points.
pub fn project_vars(g: &mut Graph, points: Var, global_r: Var, scale: Var, trans: Var) -> Var {
    let r = g.rodrigues(global_r);
    let r = g.reshape(r, &[3, 3]);
    let rt = g.transpose(r);
    let rotated = g.matmul(points, rt);
    let xy = g.cols(rotated, 0, 2);
    let scaled = g.scale_by(xy, scale);
    g.add_row(scaled, trans)
}

pub fn rodrigues(axis_angle: &[f64; 3]) -> Mat3 {
    rotation::axis_angle_to_matrix(axis_angle)
}

pub fn skin(template: &BodyTemplate, params: &ThetaParams) -> Result<BodyMesh> {
    params.validate()?;
    let mut g = Graph::new();
    let c = TemplateConsts::new(&mut g, template);
    let th = ThetaVars::from_params(&mut g, params);
    let m = skin_vars(&mut g, &c, &th);
    Ok(BodyMesh {
        vertices: g.data(m.vertices).to_vec(),
        model_joints: g.data(m.joints).to_vec(),
    })
}

/// `[14, 3]` joints from a posed mesh.
pub fn regress_joints(mesh: &BodyMesh, template: &BodyTemplate) -> Result<Vec<f64>> {
    let nv = template.vertex_count();
    if mesh.vertices.len() != nv * 3 {
        return Err(Error::Shape {
            what: "mesh vertices".into(),
            expected: vec![nv, 3],
            actual: vec![mesh.vertices.len()],
        });
    }
    let mut out = vec![0.0; NUM_LSP * 3];
    for k in 0..NUM_LSP {
        let row = &template.joint_regressor[k * nv..(k + 1) * nv];
        for (i, w) in row.iter().enumerate() {
            if *w != 0.0 {
                for c in 0..3 {
                    out[k * 3 + c] += w * mesh.vertices[i * 3 + c];
                }
            }
        }
    }
    Ok(out)
}

/// Projects `[n, 3]` points to `[n, 2]`.
pub fn project(points: &[f64], global_r: &[f64; 3], scale: f64, trans: &[f64; 2]) -> Result<Vec<f64>> {
    if points.len() % 3 != 0 {
        return Err(Error::Shape {
            what: "points".into(),
            expected: vec![points.len() / 3, 3],
            actual: vec![points.len()],
        });
    }
    if !(scale > 0.0) {
        return Err(Error::InvalidParams(format!("scale must be positive, got {scale}")));
    }
    let r = rodrigues(global_r);
    Ok(points
        .chunks(3)
        .flat_map(|p| {
            let q = rotation::mat_vec(&r, &[p[0], p[1], p[2]]);
            [scale * q[0] + trans[0], scale * q[1] + trans[1]]
        })
        .collect())
}

/// Ground-truth `(J3d [14, 3], J2d [14, 2])` for a parameter set.
pub fn joints_for(template: &BodyTemplate, params: &ThetaParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let mesh = skin(template, params)?;
    let j3d = regress_joints(&mesh, template)?;
    let j2d = project(&j3d, &params.global_r, params.scale, &params.trans)?;
    Ok((j3d, j2d))
}
