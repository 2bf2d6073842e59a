//! Rotation-group numerics on 3×3 matrices stored row-major in 9-vectors.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Rotation angles closer than this to π are treated as cut-locus points.
pub(crate) const CUT_LOCUS_EPS: f64 = 1e-10;
const SMALL_ANGLE: f64 = 1e-6;

pub fn mat_from_slice(x: &[f64]) -> Matrix3<f64> {
    Matrix3::new(x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7], x[8])
}

pub fn write_mat(m: &Matrix3<f64>, out: &mut [f64]) {
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[(r, c)];
        }
    }
}

pub fn mat_to_vec(m: &Matrix3<f64>) -> Vec<f64> {
    let mut v = vec![0.0; 9];
    write_mat(m, &mut v);
    v
}

/// Standard hat map: `hat(w) x = w × x`.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0)
}

/// Inverse of [`hat`] applied to the skew part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Skew-symmetric matrix whose strictly lower-triangular entries, read column
/// by column, are `(v1, v2, v3)`: entries (2,1), (3,1), (3,2) in 1-based indexing.
pub fn iota(v: [f64; 3]) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[0], -v[1], v[0], 0.0, -v[2], v[1], v[2], 0.0)
}

/// Rodrigues formula for `expm(hat(w))`.
pub fn expm_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = hat(w);
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation angle in [0, π], computed with `atan2` for accuracy at both ends.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = 0.5 * (r.trace() - 1.0);
    let s = vee(r).norm();
    s.atan2(c)
}

/// Principal matrix logarithm of a rotation, returned as the axis-angle vector `w`
/// with `expm(hat(w)) = r` and `|w| = angle < π`.
pub fn logm_so3(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let c = 0.5 * (r.trace() - 1.0);
    let sv = vee(r);
    let s = sv.norm();
    let theta = s.atan2(c);
    if std::f64::consts::PI - theta < CUT_LOCUS_EPS {
        return Err(Error::CutLocus(format!(
            "rotation angle {theta} is at π; the logarithm is not unique"
        )));
    }
    if theta < SMALL_ANGLE {
        return Ok(sv * (1.0 + theta * theta / 6.0));
    }
    if theta < std::f64::consts::PI - 1e-3 {
        return Ok(sv * (theta / s));
    }
    // Near π the skew part is tiny; recover the axis from the symmetric part
    // B = (R + Rᵀ)/2 − cI = (1 − c) a aᵀ.
    let b = (r + r.transpose()) * 0.5 - Matrix3::identity() * c;
    let k = (0..3)
        .max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)]))
        .unwrap_or(0);
    let scale = (b[(k, k)] * (1.0 - c)).sqrt();
    let mut axis = Vector3::new(b[(0, k)], b[(1, k)], b[(2, k)]) / scale;
    axis.normalize_mut();
    if axis.dot(&sv) < 0.0 {
        axis = -axis;
    }
    Ok(axis * theta)
}

/// Nearest rotation in Frobenius norm (polar factor with det = +1).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if !m.iter().all(|x| x.is_finite()) {
        return Err(Error::Degenerate("matrix has non-finite entries".into()));
    }
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Degenerate("SVD failed".into())),
    };
    let sv = svd.singular_values;
    let smax = sv.max();
    let (imin, smin) = sv.argmin();
    if smax == 0.0 || smin <= 1e-12 * smax {
        return Err(Error::Degenerate(format!(
            "matrix is singular (singular values {:?})",
            sv.as_slice()
        )));
    }
    let mut u = u;
    if (u * v_t).determinant() < 0.0 {
        let col = -u.column(imin);
        u.set_column(imin, &col);
    }
    Ok(u * v_t)
}
