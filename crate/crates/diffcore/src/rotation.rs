//! Axis-angle to rotation matrix conversion and its Jacobian.
//!
//! With `K = [w]x` (the unnormalized skew matrix) and `t = |w|`,
//! `R = I + a(t) K + b(t) K^2` where `a = sin t / t` and `b = (1 - cos t) / t^2`.
//! Below `TAYLOR_THRESHOLD` the second-order expansion `I + K + K^2 / 2` is used.
//! Between that and `SERIES_THRESHOLD` the coefficients come from their power
//! series, which avoids cancellation in the derivative terms.

/// Norm below which the second-order Taylor expansion replaces the closed form.
pub const TAYLOR_THRESHOLD: f64 = 1e-8;
const SERIES_THRESHOLD: f64 = 1e-2;

/// Row-major 3x3 matrix.
pub type Mat3 = [f64; 9];

pub fn skew(w: &[f64; 3]) -> Mat3 {
    [0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = (0..3).map(|k| a[r * 3 + k] * b[k * 3 + c]).sum();
        }
    }
    out
}

pub fn transpose(a: &Mat3) -> Mat3 {
    [a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]]
}

pub fn determinant(a: &Mat3) -> f64 {
    a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
        + a[2] * (a[3] * a[7] - a[4] * a[6])
}

pub fn mat_vec(a: &Mat3, v: &[f64; 3]) -> [f64; 3] {
    [
        a[0] * v[0] + a[1] * v[1] + a[2] * v[2],
        a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
        a[6] * v[0] + a[7] * v[1] + a[8] * v[2],
    ]
}

pub const IDENTITY: Mat3 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

/// Returns `(a, b, c, d)` where `c = a'(t)/t` and `d = b'(t)/t`.
fn coefficients(t: f64) -> (f64, f64, f64, f64) {
    if t < TAYLOR_THRESHOLD {
        return (1.0, 0.5, 0.0, 0.0);
    }
    let t2 = t * t;
    if t < SERIES_THRESHOLD {
        let t4 = t2 * t2;
        let t6 = t4 * t2;
        let a = 1.0 - t2 / 6.0 + t4 / 120.0 - t6 / 5040.0;
        let b = 0.5 - t2 / 24.0 + t4 / 720.0 - t6 / 40320.0;
        let c = -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0 + t6 / 45360.0;
        let d = -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0 + t6 / 453600.0;
        return (a, b, c, d);
    }
    let (s, co) = t.sin_cos();
    let a = s / t;
    let b = (1.0 - co) / t2;
    let c = (t * co - s) / (t2 * t);
    let d = (t * s - 2.0 * (1.0 - co)) / (t2 * t2);
    (a, b, c, d)
}

/// Rodrigues map from an axis-angle vector to a rotation matrix.
pub fn axis_angle_to_matrix(w: &[f64; 3]) -> Mat3 {
    let t = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let (a, b, _, _) = coefficients(t);
    let k = skew(w);
    let k2 = mat_mul(&k, &k);
    let mut r = IDENTITY;
    for i in 0..9 {
        r[i] += a * k[i] + b * k2[i];
    }
    r
}

/// Partial derivatives `dR/dw_k` for `k = 0, 1, 2`.
pub fn axis_angle_jacobian(w: &[f64; 3]) -> [Mat3; 3] {
    let t = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let (a, b, c, d) = coefficients(t);
    let k = skew(w);
    let k2 = mat_mul(&k, &k);
    let mut out = [[0.0; 9]; 3];
    for (axis, slot) in out.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[axis] = 1.0;
        let ek = skew(&e);
        let ek_k = mat_mul(&ek, &k);
        let k_ek = mat_mul(&k, &ek);
        for i in 0..9 {
            slot[i] = c * w[axis] * k[i] + a * ek[i] + d * w[axis] * k2[i] + b * (ek_k[i] + k_ek[i]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn max_abs_diff(a: &Mat3, b: &Mat3) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn zero_is_identity() {
        assert_eq!(axis_angle_to_matrix(&[0.0; 3]), IDENTITY);
    }

    #[test]
    fn half_turn_about_x() {
        let r = axis_angle_to_matrix(&[PI, 0.0, 0.0]);
        let expected = [1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0];
        assert!(max_abs_diff(&r, &expected) < 1e-15);
    }

    #[test]
    fn series_branch_matches_closed_form_at_the_seam() {
        // Evaluate the closed form directly just above the series threshold.
        for &t in &[0.0099999, 0.01, 0.0100001, 0.003, 1e-5] {
            let w = [t * 0.6, -t * 0.8, 0.0];
            let (s, co) = f64::sin_cos(t);
            let a = s / t;
            let b = (1.0 - co) / (t * t);
            let k = skew(&w);
            let k2 = mat_mul(&k, &k);
            let mut r = IDENTITY;
            for i in 0..9 {
                r[i] += a * k[i] + b * k2[i];
            }
            assert!(max_abs_diff(&r, &axis_angle_to_matrix(&w)) < 1e-14, "t={t}");
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let h = 1e-6;
        for w in [[0.3, -1.2, 0.7], [2.9, 0.1, -0.4], [1e-3, 2e-3, -1e-3], [1e-9, 0.0, 2e-9]] {
            let jac = axis_angle_jacobian(&w);
            for k in 0..3 {
                let mut wp = w;
                let mut wm = w;
                wp[k] += h;
                wm[k] -= h;
                let rp = axis_angle_to_matrix(&wp);
                let rm = axis_angle_to_matrix(&wm);
                for i in 0..9 {
                    let fd = (rp[i] - rm[i]) / (2.0 * h);
                    assert!((fd - jac[k][i]).abs() < 1e-8, "w={w:?} k={k} i={i}");
                }
            }
        }
    }
}
