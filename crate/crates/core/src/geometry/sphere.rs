use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub(crate) const CUT_LOCUS_EPS: f64 = 1e-10;
const ZERO_TANGENT: f64 = 1e-14;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Geodesic angle between unit vectors, `atan2(|q − ⟨p,q⟩p|, ⟨p,q⟩)`.
pub(crate) fn angle(p: &[f64], q: &[f64]) -> f64 {
    let c = dot(p, q);
    let s = p
        .iter()
        .zip(q)
        .map(|(a, b)| {
            let r = b - c * a;
            r * r
        })
        .sum::<f64>()
        .sqrt();
    s.atan2(c)
}

pub(crate) fn exp_into(p: &[f64], v: &[f64], out: &mut [f64]) {
    let n = norm(v);
    if n < ZERO_TANGENT {
        out.copy_from_slice(p);
        return;
    }
    let sinc = if n < 1e-6 { 1.0 - n * n / 6.0 } else { n.sin() / n };
    let c = n.cos();
    for ((o, a), b) in out.iter_mut().zip(p).zip(v) {
        *o = c * a + sinc * b;
    }
    let r = norm(out);
    out.iter_mut().for_each(|x| *x /= r);
}

pub(crate) fn log_into(p: &[f64], q: &[f64], out: &mut [f64]) -> Result<()> {
    let c = dot(p, q);
    for ((o, a), b) in out.iter_mut().zip(p).zip(q) {
        *o = b - c * a;
    }
    let s = norm(out);
    let theta = s.atan2(c);
    if theta < ZERO_TANGENT {
        out.iter_mut().for_each(|x| *x = 0.0);
        return Ok(());
    }
    if std::f64::consts::PI - theta < CUT_LOCUS_EPS {
        return Err(Error::CutLocus(format!(
            "points are antipodal (angle {theta})"
        )));
    }
    let scale = theta / s;
    out.iter_mut().for_each(|x| *x *= scale);
    Ok(())
}

/// Orthonormal basis of the tangent space at `p`: Gram–Schmidt over the
/// standard axes with the axis most aligned with `p` dropped.
pub(crate) fn tangent_basis(p: &[f64]) -> Vec<Vec<f64>> {
    let dim = p.len();
    let drop = (0..dim)
        .max_by(|&i, &j| p[i].abs().total_cmp(&p[j].abs()))
        .unwrap_or(0);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim - 1);
    for axis in (0..dim).filter(|&i| i != drop) {
        let mut e = vec![0.0; dim];
        e[axis] = 1.0;
        let c = dot(&e, p);
        e.iter_mut().zip(p).for_each(|(x, a)| *x -= c * a);
        for b in &basis {
            let c = dot(&e, b);
            e.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = norm(&e);
        e.iter_mut().for_each(|x| *x /= n);
        basis.push(e);
    }
    basis
}

/// Rotation taking `p` to `q` along their great circle and fixing the
/// orthogonal complement of span{p, q}.
pub fn rotation_between(p: &[f64], q: &[f64]) -> Result<DMatrix<f64>> {
    if p.len() != q.len() || p.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "rotation_between needs sphere points of equal dimension, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    let dim = p.len();
    let c = dot(p, q);
    if 1.0 + c < 1e-12 {
        return Err(Error::CutLocus(
            "rotation_between: points are antipodal".into(),
        ));
    }
    let mut u: Vec<f64> = q.iter().zip(p).map(|(b, a)| b - c * a).collect();
    let s = norm(&u);
    if s < 1e-15 {
        return Ok(DMatrix::identity(dim, dim));
    }
    u.iter_mut().for_each(|x| *x /= s);
    let pv = nalgebra::DVector::from_column_slice(p);
    let uv = nalgebra::DVector::from_vec(u);
    let mut r = DMatrix::identity(dim, dim);
    r += (&pv * pv.transpose() + &uv * uv.transpose()) * (c - 1.0);
    r += (&uv * pv.transpose() - &pv * uv.transpose()) * s;
    Ok(r)
}
