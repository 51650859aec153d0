//! Training objective: parameter, 3D joint, 2D joint and skeleton-branch
//! losses, the least-squares pose discriminator, and their weighted sum.

use diffcore::rotation;
use diffcore::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{ThetaParams, ThetaVars, NUM_POSE_JOINTS};
use crate::error::{Error, Result};
use crate::nn::{self, Loader};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pm: f64,
    pub j3d: f64,
    pub j2d: f64,
    pub r: f64,
    pub j2dj: f64,
    pub s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pm: 20.0,
            j3d: 60.0,
            j2d: 10.0,
            r: 0.6,
            j2dj: 10.0,
            s: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.pm, self.j3d, self.j2d, self.r, self.j2dj, self.s];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Individual loss terms; `None` marks a term that is unavailable for the sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<T> {
    pub pm: Option<T>,
    pub j3d: Option<T>,
    pub j2d: Option<T>,
    pub r: Option<T>,
    pub j2dj: Option<T>,
    pub s: Option<T>,
}

impl<T> Default for LossTerms<T> {
    fn default() -> Self {
        Self {
            pm: None,
            j3d: None,
            j2d: None,
            r: None,
            j2dj: None,
            s: None,
        }
    }
}

impl<T: Copy> LossTerms<T> {
    fn weighted(&self, w: &LossWeights) -> Vec<(T, f64)> {
        [
            (self.pm, w.pm),
            (self.j3d, w.j3d),
            (self.j2d, w.j2d),
            (self.r, w.r),
            (self.j2dj, w.j2dj),
            (self.s, w.s),
        ]
        .into_iter()
        .filter_map(|(t, w)| t.map(|t| (t, w)))
        .collect()
    }
}

/// Weighted sum of the available terms.
pub fn total_loss(terms: &LossTerms<f64>, w: &LossWeights) -> Result<f64> {
    let parts = terms.weighted(w);
    if parts.is_empty() {
        return Err(Error::NoSupervision);
    }
    Ok(parts.iter().map(|(t, w)| w * t).sum())
}

pub fn total_loss_vars(g: &mut Graph, terms: &LossTerms<Var>, w: &LossWeights) -> Result<Var> {
    let parts = terms.weighted(w);
    let Some(((first, w0), rest)) = parts.split_first() else {
        return Err(Error::NoSupervision);
    };
    let mut acc = g.scale(*first, *w0);
    for (t, w) in rest {
        let s = g.scale(*t, *w);
        acc = g.add(acc, s);
    }
    Ok(acc)
}

fn gt_rotations(gt: &ThetaParams) -> Vec<f64> {
    gt.theta
        .iter()
        .chain(std::iter::once(&gt.global_r))
        .flat_map(rotation::axis_angle_to_matrix)
        .collect()
}

/// Mean squared error over the 24 rotation matrices (23 joints and the
/// global rotation) plus mean squared error over the shape coefficients.
pub fn loss_pm_vars(g: &mut Graph, pred: &ThetaVars, gt: &ThetaParams) -> Var {
    let pose = g.reshape(pred.pose, &[3 * NUM_POSE_JOINTS]);
    let all = g.concat(&[pose, pred.global_r]);
    let rots = g.rodrigues(all);
    let n = g.value(rots).numel();
    let rots = g.reshape(rots, &[n]);
    let target = g.constant(Tensor::vector(gt_rotations(gt)));
    let d = g.sub(rots, target);
    let d = g.mul(d, d);
    let rot_term = g.mean(d);
    let beta = g.reshape(pred.beta, &[gt.beta.len()]);
    let tb = g.constant(Tensor::vector(gt.beta.to_vec()));
    let db = g.sub(beta, tb);
    let db = g.mul(db, db);
    let beta_term = g.mean(db);
    g.add(rot_term, beta_term)
}

pub fn loss_pm(pred: &ThetaParams, gt: &ThetaParams) -> f64 {
    let (a, b) = (gt_rotations(pred), gt_rotations(gt));
    let rot = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    let beta = pred.beta.iter().zip(&gt.beta).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / gt.beta.len() as f64;
    rot + beta
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            what: what.into(),
            expected: vec![b],
            actual: vec![a],
        });
    }
    Ok(())
}

/// Subtracts the joint mean from `[n, 3]` points.
pub fn center_joints(points: &[f64]) -> Vec<f64> {
    let n = points.len() / 3;
    let mut mean = [0.0; 3];
    for p in points.chunks(3) {
        for c in 0..3 {
            mean[c] += p[c] / n as f64;
        }
    }
    points.chunks(3).flat_map(|p| [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]]).collect()
}

fn center_joints_vars(g: &mut Graph, points: Var) -> Var {
    let t = g.transpose(points);
    let mean = g.row_means(t);
    let neg = g.scale(mean, -1.0);
    g.add_row(points, neg)
}

/// Mean squared error between joint-mean-centered `[n, 3]` joint sets.
pub fn loss_3d_vars(g: &mut Graph, pred: Var, gt: &[f64]) -> Result<Var> {
    check_len("3d joints", g.value(pred).numel(), gt.len())?;
    let pc = center_joints_vars(g, pred);
    let gc = g.constant(Tensor::new(g.shape(pred).to_vec(), center_joints(gt))?);
    let d = g.sub(pc, gc);
    let d = g.mul(d, d);
    Ok(g.mean(d))
}

pub fn loss_3d(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_len("3d joints", pred.len(), gt.len())?;
    let (a, b) = (center_joints(pred), center_joints(gt));
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

fn l1_vars(g: &mut Graph, what: &str, pred: Var, gt: &[f64]) -> Result<Var> {
    check_len(what, g.value(pred).numel(), gt.len())?;
    let t = g.constant(Tensor::new(g.shape(pred).to_vec(), gt.to_vec())?);
    let d = g.sub(pred, t);
    let d = g.abs(d);
    Ok(g.mean(d))
}

fn l1(what: &str, pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_len(what, pred.len(), gt.len())?;
    Ok(pred.iter().zip(gt).map(|(x, y)| (x - y).abs()).sum::<f64>() / pred.len() as f64)
}

/// Mean absolute error between projected joints.
pub fn loss_2d_vars(g: &mut Graph, pred: Var, gt: &[f64]) -> Result<Var> {
    l1_vars(g, "2d joints", pred, gt)
}

pub fn loss_2d(pred: &[f64], gt: &[f64]) -> Result<f64> {
    l1("2d joints", pred, gt)
}

/// Mean absolute error of the skeleton-branch coordinates in heatmap units.
pub fn loss_2dj_vars(g: &mut Graph, skeleton: Var, gt: &[f64]) -> Result<Var> {
    l1_vars(g, "skeleton coordinates", skeleton, gt)
}

pub fn loss_2dj(skeleton: &[f64], gt: &[f64]) -> Result<f64> {
    l1("skeleton coordinates", skeleton, gt)
}

const DISC_JOINT_HIDDEN: usize = 16;
const DISC_POSE_HIDDEN: usize = 32;

pub fn init_disc_params(seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for j in 0..NUM_POSE_JOINTS {
        nn::add_linear(&mut s, &mut rng, &format!("disc.joint{j:02}.fc0"), 9, DISC_JOINT_HIDDEN)?;
        nn::add_linear(&mut s, &mut rng, &format!("disc.joint{j:02}.fc1"), DISC_JOINT_HIDDEN, 1)?;
    }
    nn::add_linear(&mut s, &mut rng, "disc.pose.fc0", 9 * NUM_POSE_JOINTS, DISC_POSE_HIDDEN)?;
    nn::add_linear(&mut s, &mut rng, "disc.pose.fc1", DISC_POSE_HIDDEN, 1)?;
    Ok(s)
}

/// Rotation matrices `[23, 9]` of a pose given as axis-angles `[23, 3]`.
pub fn pose_rotations(g: &mut Graph, pose: Var) -> Var {
    let r = g.rodrigues(pose);
    g.reshape(r, &[NUM_POSE_JOINTS, 9])
}

/// Discriminator scores `[24]`: one per joint, then one for the whole pose.
pub fn disc_scores(g: &mut Graph, p: Loader, rotations: Var) -> Result<Var> {
    let mut scores = Vec::with_capacity(NUM_POSE_JOINTS + 1);
    for j in 0..NUM_POSE_JOINTS {
        let row = g.gather_rows(rotations, &[j]);
        let row = g.reshape(row, &[9]);
        let (w, b) = p.layer(g, &format!("disc.joint{j:02}.fc0"))?;
        let h = nn::linear(g, w, b, row);
        let h = g.relu(h);
        let (w, b) = p.layer(g, &format!("disc.joint{j:02}.fc1"))?;
        scores.push(nn::linear(g, w, b, h));
    }
    let flat = g.reshape(rotations, &[9 * NUM_POSE_JOINTS]);
    let (w, b) = p.layer(g, "disc.pose.fc0")?;
    let h = nn::linear(g, w, b, flat);
    let h = g.relu(h);
    let (w, b) = p.layer(g, "disc.pose.fc1")?;
    scores.push(nn::linear(g, w, b, h));
    Ok(g.concat(&scores))
}

/// Least-squares adversarial losses from discriminator score vectors:
/// `L_d = mean((D(real) - 1)²) + mean(D(fake)²)` and `L_r = mean((D(fake) - 1)²)`.
pub fn disc_losses_vars(g: &mut Graph, real: &[Var], fake: &[Var]) -> (Option<Var>, Option<Var>) {
    let sq_mean = |g: &mut Graph, vs: &[Var], target: f64| -> Option<Var> {
        if vs.is_empty() {
            return None;
        }
        let all = g.concat(vs);
        let d = g.offset(all, -target);
        let d = g.mul(d, d);
        Some(g.mean(d))
    };
    let real_term = sq_mean(g, real, 1.0);
    let fake_term = sq_mean(g, fake, 0.0);
    let l_d = match (real_term, fake_term) {
        (Some(a), Some(b)) => Some(g.add(a, b)),
        (a, b) => a.or(b),
    };
    let l_r = sq_mean(g, fake, 1.0);
    (l_d, l_r)
}

pub fn disc_losses(real: &[f64], fake: &[f64]) -> (f64, f64) {
    let mean = |v: &[f64], t: f64| v.iter().map(|x| (x - t).powi(2)).sum::<f64>() / v.len() as f64;
    (mean(real, 1.0) + mean(fake, 0.0), mean(fake, 1.0))
}
