//! Pose error metrics over `[J, 3]` joint sets and joint sequences.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::center_joints;

/// Relative singular-value threshold below which a joint set is treated as
/// collinear.
const DEGENERATE_RATIO: f64 = 1e-9;

fn check_pair(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() || pred.len() % 3 != 0 || pred.is_empty() {
        return Err(Error::Shape {
            what: "joint sets".into(),
            expected: vec![gt.len() / 3, 3],
            actual: vec![pred.len()],
        });
    }
    Ok(())
}

fn mean_distance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() / 3;
    a.chunks(3)
        .zip(b.chunks(3))
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
        .sum::<f64>()
        / n as f64
}

/// Mean per-joint Euclidean distance, optionally after removing each set's
/// joint mean.
pub fn mpjpe(pred: &[f64], gt: &[f64], centered: bool) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(if centered {
        mean_distance(&center_joints(pred), &center_joints(gt))
    } else {
        mean_distance(pred, gt)
    })
}

/// Similarity transform `x -> s R x + t` fitted by [`procrustes_align`].
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
}

fn points(v: &[f64]) -> Vec<Vector3<f64>> {
    v.chunks(3).map(|p| Vector3::new(p[0], p[1], p[2])).collect()
}

/// Least-squares similarity transform taking `pred` onto `gt`, with
/// reflections excluded.
pub fn procrustes_fit(pred: &[f64], gt: &[f64]) -> Result<Similarity> {
    check_pair(pred, gt)?;
    let (x, y) = (points(pred), points(gt));
    if x.len() < 3 {
        return Err(Error::AlignmentFailed(format!("{} joints, need at least 3", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<Vector3<f64>>() / n;
    let my = y.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut gt_cov = Matrix3::zeros();
    let mut pred_cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (a, b) in x.iter().zip(&y) {
        let (xa, yb) = (a - mx, b - my);
        cov += yb * xa.transpose();
        gt_cov += yb * yb.transpose();
        pred_cov += xa * xa.transpose();
        var_x += xa.norm_squared();
    }
    for (name, m) in [("ground truth", gt_cov), ("prediction", pred_cov)] {
        let sv = m.symmetric_eigenvalues();
        let mut sv: Vec<f64> = sv.iter().map(|v| v.abs()).collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        if !(sv[0] > 0.0) || sv[1] <= DEGENERATE_RATIO * sv[0] {
            return Err(Error::AlignmentFailed(format!("{name} joints are collinear or coincident")));
        }
    }
    let first = nearest_rotation(&cov);
    let rotation = refine_rotation(&cov, first);
    let scale = (cov * rotation.transpose()).trace() / var_x;
    let translation = my - scale * rotation * mx;
    Ok(Similarity {
        rotation,
        scale,
        translation,
    })
}

/// Proper rotation `R` maximizing `tr(R^T m)`.
fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Newton polar iteration on the residual `cov R^T`, which is close to
/// symmetric positive definite for a good start. The SVD alone leaves errors
/// near 1e-11 relative; this brings them to rounding level. The start is kept
/// when the iteration does not settle on a proper rotation.
fn refine_rotation(cov: &Matrix3<f64>, start: Matrix3<f64>) -> Matrix3<f64> {
    let mut x = cov * start.transpose();
    for _ in 0..30 {
        let Some(inv) = x.try_inverse() else {
            return start;
        };
        let next = (x + inv.transpose()) * 0.5;
        let change = (next - x).abs().max();
        x = next;
        if change < 1e-15 {
            break;
        }
    }
    let orthogonal = (x.transpose() * x - Matrix3::identity()).abs().max() <= 1e-12;
    if !x.iter().all(|v| v.is_finite()) || !orthogonal || x.determinant() < 0.0 {
        return start;
    }
    x * start
}

/// `pred` mapped by its optimal similarity transform onto `gt`.
pub fn procrustes_align(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    let t = procrustes_fit(pred, gt)?;
    let x = points(pred);
    let mx = x.iter().sum::<Vector3<f64>>() / x.len() as f64;
    let anchor = t.scale * t.rotation * mx + t.translation;
    Ok(x
        .iter()
        .flat_map(|p| {
            let q = t.scale * t.rotation * (p - mx) + anchor;
            [q.x, q.y, q.z]
        })
        .collect())
}

pub fn pa_mpjpe(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let aligned = procrustes_align(pred, gt)?;
    mpjpe(&aligned, gt, false)
}

/// A sequence of `[J, 3]` joint sets sampled at `fps`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSeq {
    pub frames: Vec<f64>,
    pub joints: usize,
    pub fps: f64,
}

impl JointSeq {
    pub fn new(frames: Vec<f64>, joints: usize, fps: f64) -> Result<Self> {
        if joints == 0 || frames.len() % (joints * 3) != 0 || !(fps > 0.0) {
            return Err(Error::Shape {
                what: "joint sequence".into(),
                expected: vec![0, joints, 3],
                actual: vec![frames.len()],
            });
        }
        Ok(Self { frames, joints, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.len() / (self.joints * 3)
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Finite differences scaled by the frame rate.
    fn derivative(&self) -> JointSeq {
        let w = self.joints * 3;
        let frames = self
            .frames
            .chunks(w)
            .zip(self.frames.chunks(w).skip(1))
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (y - x) * self.fps).collect::<Vec<_>>())
            .collect();
        JointSeq {
            frames,
            joints: self.joints,
            fps: self.fps,
        }
    }
}

fn check_seqs(pred: &JointSeq, gt: &JointSeq, min_frames: usize) -> Result<()> {
    if pred.joints != gt.joints || pred.len() != gt.len() || pred.fps != gt.fps {
        return Err(Error::Shape {
            what: "joint sequences".into(),
            expected: vec![gt.len(), gt.joints, 3],
            actual: vec![pred.len(), pred.joints, 3],
        });
    }
    if gt.len() < min_frames {
        return Err(Error::TooFewFrames {
            minimum: min_frames,
            actual: gt.len(),
        });
    }
    Ok(())
}

/// Mean per-joint velocity error (units per second).
pub fn mpjve(pred: &JointSeq, gt: &JointSeq) -> Result<f64> {
    check_seqs(pred, gt, 2)?;
    Ok(mean_distance(&pred.derivative().frames, &gt.derivative().frames))
}

/// Mean per-joint acceleration error (units per second squared).
pub fn mpjae(pred: &JointSeq, gt: &JointSeq) -> Result<f64> {
    check_seqs(pred, gt, 3)?;
    Ok(mean_distance(
        &pred.derivative().derivative().frames,
        &gt.derivative().derivative().frames,
    ))
}

/// Aggregate metric report, in millimeters and seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpjve: f64,
    pub mpjae: f64,
    pub n_frames: usize,
    pub split: String,
}

/// Frame-averaged position and temporal metrics over sequences of `[J, 3]`
/// joints already expressed in millimeters. Sequences shorter than three
/// frames contribute only to the position metrics.
pub fn sequence_report(pairs: &[(JointSeq, JointSeq)], split: &str) -> Result<MetricReport> {
    let mut n_frames = 0;
    let (mut pos, mut pa) = (0.0, 0.0);
    let (mut vel, mut vel_n) = (0.0, 0usize);
    let (mut acc, mut acc_n) = (0.0, 0usize);
    for (pred, gt) in pairs {
        check_seqs(pred, gt, 1)?;
        let w = gt.joints * 3;
        for (p, g) in pred.frames.chunks(w).zip(gt.frames.chunks(w)) {
            pos += mpjpe(p, g, true)?;
            pa += pa_mpjpe(p, g)?;
            n_frames += 1;
        }
        let k = gt.len();
        if k >= 3 {
            vel += mpjve(pred, gt)? * (k - 1) as f64;
            vel_n += k - 1;
            acc += mpjae(pred, gt)? * (k - 2) as f64;
            acc_n += k - 2;
        }
    }
    if n_frames == 0 {
        return Err(Error::MissingData("no frames to evaluate".into()));
    }
    let avg = |s: f64, n: usize| if n > 0 { s / n as f64 } else { 0.0 };
    Ok(MetricReport {
        mpjpe: pos / n_frames as f64,
        pa_mpjpe: pa / n_frames as f64,
        mpjve: avg(vel, vel_n),
        mpjae: avg(acc, acc_n),
        n_frames,
        split: split.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_joints(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n * 3).map(|_| rng.gen_range(-500.0..500.0)).collect()
    }

    fn transform(v: &[f64], r: &Rotation3<f64>, s: f64, t: Vector3<f64>) -> Vec<f64> {
        points(v)
            .iter()
            .flat_map(|p| {
                let q = s * (r * p) + t;
                [q.x, q.y, q.z]
            })
            .collect()
    }

    #[test]
    fn mpjpe_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gt = random_joints(&mut rng, 14);
        assert_eq!(mpjpe(&gt, &gt, true).unwrap(), 0.0);
        let shifted: Vec<f64> = gt.chunks(3).flat_map(|p| [p[0] + 10.0, p[1], p[2]]).collect();
        assert!(mpjpe(&shifted, &gt, true).unwrap() < 1e-12);
        let mut one = gt.clone();
        one[5 * 3 + 1] += 14.0;
        assert!((mpjpe(&one, &gt, false).unwrap() - 1.0).abs() < 1e-12);
        assert!(mpjpe(&gt[..6], &gt, true).is_err());
    }

    #[test]
    fn similarity_is_recovered_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_joints(&mut rng, 14);
        let r = Rotation3::new(Vector3::new(0.3, -1.1, 0.7));
        let pred = transform(&gt, &r, 1.7, Vector3::new(5.0, -20.0, 3.0));
        let aligned = procrustes_align(&pred, &gt).unwrap();
        for (a, b) in aligned.iter().zip(&gt) {
            assert!((a - b).abs() < 1e-9);
        }
        let fit = procrustes_fit(&gt, &gt).unwrap();
        assert!((fit.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!((fit.scale - 1.0).abs() < 1e-12);
        assert!(fit.translation.norm() < 1e-9);
    }

    #[test]
    fn reflections_are_excluded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_joints(&mut rng, 6);
        let mirrored: Vec<f64> = gt.chunks(3).flat_map(|p| [-p[0], p[1], p[2]]).collect();
        let fit = procrustes_fit(&mirrored, &gt).unwrap();
        assert!((fit.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_sets_fail() {
        let line: Vec<f64> = (0..5).flat_map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let other = random_joints(&mut rng, 5);
        assert!(matches!(procrustes_align(&other, &line), Err(Error::AlignmentFailed(_))));
        assert!(matches!(procrustes_align(&line, &other), Err(Error::AlignmentFailed(_))));
        assert!(matches!(procrustes_align(&[0.0; 15], &other), Err(Error::AlignmentFailed(_))));
    }

    #[test]
    fn temporal_metric_examples() {
        let gt_frames: Vec<f64> = (0..5).flat_map(|f| [10.0 * f as f64, 0.0, 0.0]).collect();
        let gt = JointSeq::new(gt_frames, 1, 10.0).unwrap();
        let still = JointSeq::new(vec![0.0; 15], 1, 10.0).unwrap();
        assert!((mpjve(&still, &gt).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(mpjae(&still, &gt).unwrap(), 0.0);
        assert_eq!(mpjve(&gt, &gt).unwrap(), 0.0);
        let c = JointSeq::new(vec![3.0; 15], 1, 10.0).unwrap();
        assert_eq!(mpjve(&c, &still).unwrap(), 0.0);
        assert_eq!(mpjae(&c, &still).unwrap(), 0.0);
        let short = JointSeq::new(vec![0.0; 6], 1, 10.0).unwrap();
        assert!(mpjae(&short, &short).is_err());
        assert!(mpjve(&short, &short).is_ok());
    }
}
