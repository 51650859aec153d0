use serde::{Deserialize, Serialize};

use crate::body::NUM_POSE_JOINTS;
use crate::error::{Error, Result};

pub const BETA_DIM: usize = 10;
/// `3 * 23` pose + 10 shape + 3 global rotation + 2 translation + 1 scale.
pub const THETA_DIM: usize = 85;

pub(crate) const POSE_OFFSET: usize = 0;
pub(crate) const BETA_OFFSET: usize = 69;
pub(crate) const ROT_OFFSET: usize = 79;
pub(crate) const TRANS_OFFSET: usize = 82;
pub(crate) const SCALE_OFFSET: usize = 84;

/// Body state `{theta, beta, R, t, s}` under a weak-perspective camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaParams {
    /// Axis-angle rotation of joints 1..=23 relative to their parents (radians).
    pub theta: [[f64; 3]; NUM_POSE_JOINTS],
    pub beta: [f64; BETA_DIM],
    /// Global axis-angle rotation applied before projection.
    pub global_r: [f64; 3],
    /// Image-plane translation (normalized image units).
    pub trans: [f64; 2],
    /// Image-plane scale, strictly positive.
    pub scale: f64,
}

impl Default for ThetaParams {
    fn default() -> Self {
        Self {
            theta: [[0.0; 3]; NUM_POSE_JOINTS],
            beta: [0.0; BETA_DIM],
            global_r: [0.0; 3],
            trans: [0.0; 2],
            scale: 1.0,
        }
    }
}

impl ThetaParams {
    /// Packs into the 85-value layout `[theta(69), beta(10), R(3), t(2), s(1)]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(THETA_DIM);
        v.extend(self.theta.iter().flatten());
        v.extend(self.beta);
        v.extend(self.global_r);
        v.extend(self.trans);
        v.push(self.scale);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != THETA_DIM {
            return Err(Error::Shape {
                what: "theta params".into(),
                expected: vec![THETA_DIM],
                actual: vec![v.len()],
            });
        }
        let mut p = Self::default();
        for (j, rot) in p.theta.iter_mut().enumerate() {
            rot.copy_from_slice(&v[POSE_OFFSET + 3 * j..POSE_OFFSET + 3 * j + 3]);
        }
        p.beta.copy_from_slice(&v[BETA_OFFSET..BETA_OFFSET + BETA_DIM]);
        p.global_r.copy_from_slice(&v[ROT_OFFSET..ROT_OFFSET + 3]);
        p.trans.copy_from_slice(&v[TRANS_OFFSET..TRANS_OFFSET + 2]);
        p.scale = v[SCALE_OFFSET];
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidParams(format!("scale must be positive, got {}", self.scale)));
        }
        if self.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite parameter".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_layout_has_85_values() {
        let mut p = ThetaParams::default();
        p.theta[22] = [1.0, 2.0, 3.0];
        p.beta[9] = 4.0;
        p.global_r = [5.0, 6.0, 7.0];
        p.trans = [8.0, 9.0];
        p.scale = 10.0;
        let v = p.to_vec();
        assert_eq!(v.len(), THETA_DIM);
        assert_eq!(&v[66..69], &[1.0, 2.0, 3.0]);
        assert_eq!(v[78], 4.0);
        assert_eq!(&v[79..85], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        assert_eq!(ThetaParams::from_slice(&v).unwrap(), p);
    }

    #[test]
    fn non_positive_scale_is_rejected() {
        let mut v = ThetaParams::default().to_vec();
        v[SCALE_OFFSET] = 0.0;
        assert!(matches!(ThetaParams::from_slice(&v), Err(Error::InvalidParams(_))));
    }
}
