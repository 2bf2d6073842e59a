//! Riemannian geometry of the supported manifolds.
//!
//! Points and tangent vectors are stored as coordinate vectors in the ambient
//! space `R^D`. The unit sphere `S^d` uses `D = d + 1`; `SO(3)` stores a
//! rotation as its row-major flattened 3×3 matrix (`D = 9`); Euclidean space
//! is flat with `d = D`.
//!
//! # SO(3) metric
//!
//! By default `SO(3)` carries the metric induced by the Frobenius inner
//! product of `R^9`, so the distance between the identity and a rotation by
//! angle `θ` is `√2·θ`. [`So3Metric::Angle`] rescales the metric by one half so
//! that the same distance is `θ`. Under the angle metric, tangent vectors are
//! stored as `V/√2` for an ambient tangent matrix `V`, which keeps the
//! Euclidean inner product of stored coordinates equal to the Riemannian one.
//! Every downstream stage works with plain coordinate inner products and never
//! needs to know which metric is active.

mod so3;
mod sphere;

use std::ops::Deref;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use so3::{expm_so3, hat, iota, logm_so3, mat_from_slice, mat_to_vec, nearest_rotation, rotation_angle, vee};
pub use sphere::rotation_between;

/// Default tolerance for point and tangent-vector invariants.
pub const POINT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum So3Metric {
    /// Ambient Frobenius inner product: `dist(I, R_θ) = √2 θ`.
    Frobenius,
    /// Half the Frobenius inner product: `dist(I, R_θ) = θ`.
    Angle,
}

impl So3Metric {
    fn coord_scale(self) -> f64 {
        match self {
            So3Metric::Frobenius => 1.0,
            So3Metric::Angle => std::f64::consts::FRAC_1_SQRT_2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Manifold {
    /// Unit sphere `S^dim` in `R^(dim+1)`.
    Sphere { dim: usize },
    So3 { metric: So3Metric },
    Euclidean { dim: usize },
}

/// A point on a manifold in ambient coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldPoint(Vec<f64>);

impl ManifoldPoint {
    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ManifoldPoint {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A tangent vector together with its base point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub base: ManifoldPoint,
    pub coords: Vec<f64>,
}

impl TangentVector {
    pub fn norm(&self) -> f64 {
        sphere::norm(&self.coords)
    }
}

impl Manifold {
    pub fn sphere(dim: usize) -> Self {
        Manifold::Sphere { dim }
    }

    pub fn so3() -> Self {
        Manifold::So3 {
            metric: So3Metric::Frobenius,
        }
    }

    pub fn euclidean(dim: usize) -> Self {
        Manifold::Euclidean { dim }
    }

    pub fn intrinsic_dim(&self) -> usize {
        match *self {
            Manifold::Sphere { dim } => dim,
            Manifold::So3 { .. } => 3,
            Manifold::Euclidean { dim } => dim,
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match *self {
            Manifold::Sphere { dim } => dim + 1,
            Manifold::So3 { .. } => 9,
            Manifold::Euclidean { dim } => dim,
        }
    }

    /// Radius of the largest ball in each tangent space on which `exp` is injective.
    pub fn injectivity_radius(&self) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Manifold::Sphere { .. } => PI,
            Manifold::So3 { metric } => {
                PI * std::f64::consts::SQRT_2 * metric.coord_scale()
            }
            Manifold::Euclidean { .. } => f64::INFINITY,
        }
    }

    pub fn is_flat(&self) -> bool {
        matches!(self, Manifold::Euclidean { .. })
    }

    fn check_len(&self, x: &[f64], what: &str) -> Result<()> {
        if x.len() != self.ambient_dim() {
            return Err(Error::InvalidInput(format!(
                "{what} has {} coordinates but {:?} needs {}",
                x.len(),
                self,
                self.ambient_dim()
            )));
        }
        Ok(())
    }

    /// Check the point invariant (unit norm, orthogonality with det > 0).
    pub fn check_point(&self, p: &[f64], tol: f64) -> Result<()> {
        self.check_len(p, "point")?;
        if !p.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidInput("point has non-finite coordinates".into()));
        }
        match *self {
            Manifold::Sphere { .. } => {
                let n = sphere::norm(p);
                if (n - 1.0).abs() > tol {
                    return Err(Error::InvalidInput(format!(
                        "sphere point has norm {n}, expected 1"
                    )));
                }
            }
            Manifold::So3 { .. } => {
                let r = mat_from_slice(p);
                let err = (r.transpose() * r - Matrix3::identity()).norm();
                if err > tol || r.determinant() <= 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "matrix is not a rotation (|RᵀR − I| = {err:e}, det = {})",
                        r.determinant()
                    )));
                }
            }
            Manifold::Euclidean { .. } => {}
        }
        Ok(())
    }

    /// Check that `v` lies in the tangent space at `p`.
    pub fn check_tangent(&self, p: &[f64], v: &[f64], tol: f64) -> Result<()> {
        self.check_len(p, "base point")?;
        self.check_len(v, "tangent vector")?;
        let scale = 1.0_f64.max(sphere::norm(v));
        let err = match *self {
            Manifold::Sphere { .. } => sphere::dot(p, v).abs(),
            Manifold::So3 { .. } => {
                let omega = mat_from_slice(p).transpose() * mat_from_slice(v);
                (omega + omega.transpose()).norm()
            }
            Manifold::Euclidean { .. } => 0.0,
        };
        if err > tol * scale {
            return Err(Error::InvalidInput(format!(
                "vector is not tangent at the base point (residual {err:e})"
            )));
        }
        Ok(())
    }

    /// Geodesic distance.
    pub fn dist(&self, p: &[f64], q: &[f64]) -> Result<f64> {
        self.check_len(p, "first point")?;
        self.check_len(q, "second point")?;
        Ok(self.dist_unchecked(p, q))
    }

    pub(crate) fn dist_unchecked(&self, p: &[f64], q: &[f64]) -> f64 {
        match *self {
            Manifold::Sphere { .. } => sphere::angle(p, q),
            Manifold::So3 { metric } => {
                let r = mat_from_slice(p).transpose() * mat_from_slice(q);
                std::f64::consts::SQRT_2 * metric.coord_scale() * rotation_angle(&r)
            }
            Manifold::Euclidean { .. } => p
                .iter()
                .zip(q)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
        }
    }

    /// Exponential map written into `out`.
    pub fn exp_into(&self, p: &[f64], v: &[f64], out: &mut [f64]) {
        match *self {
            Manifold::Sphere { .. } => sphere::exp_into(p, v, out),
            Manifold::So3 { metric } => {
                let pm = mat_from_slice(p);
                let vm = mat_from_slice(v) / metric.coord_scale();
                let w = vee(&(pm.transpose() * vm));
                so3::write_mat(&(pm * expm_so3(&w)), out);
            }
            Manifold::Euclidean { .. } => {
                for ((o, a), b) in out.iter_mut().zip(p).zip(v) {
                    *o = a + b;
                }
            }
        }
    }

    pub fn exp(&self, p: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; p.len()];
        self.exp_into(p, v, &mut out);
        out
    }

    /// Logarithm map written into `out`; fails at the cut locus of `p`.
    pub fn log_into(&self, p: &[f64], q: &[f64], out: &mut [f64]) -> Result<()> {
        match *self {
            Manifold::Sphere { .. } => sphere::log_into(p, q, out),
            Manifold::So3 { metric } => {
                let pm = mat_from_slice(p);
                let w = logm_so3(&(pm.transpose() * mat_from_slice(q)))?;
                so3::write_mat(&(pm * hat(&w) * metric.coord_scale()), out);
                Ok(())
            }
            Manifold::Euclidean { .. } => {
                for ((o, a), b) in out.iter_mut().zip(p).zip(q) {
                    *o = b - a;
                }
                Ok(())
            }
        }
    }

    pub fn log(&self, p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
        self.check_len(p, "base point")?;
        self.check_len(q, "target point")?;
        let mut out = vec![0.0; p.len()];
        self.log_into(p, q, &mut out)?;
        Ok(out)
    }

    /// Nearest point on the manifold to an ambient vector.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x, "ambient vector")?;
        match *self {
            Manifold::Sphere { .. } => {
                let n = sphere::norm(x);
                if !(n > 1e-12) || !n.is_finite() {
                    return Err(Error::Degenerate(format!(
                        "cannot project a vector of norm {n} onto the sphere"
                    )));
                }
                Ok(x.iter().map(|a| a / n).collect())
            }
            Manifold::So3 { .. } => Ok(mat_to_vec(&nearest_rotation(&mat_from_slice(x))?)),
            Manifold::Euclidean { .. } => Ok(x.to_vec()),
        }
    }

    /// Orthogonal projection of an ambient vector onto the tangent space at `p`.
    pub fn project_tangent_into(&self, p: &[f64], v: &[f64], out: &mut [f64]) {
        match *self {
            Manifold::Sphere { .. } => {
                let c = sphere::dot(p, v);
                for ((o, a), b) in out.iter_mut().zip(p).zip(v) {
                    *o = b - c * a;
                }
            }
            Manifold::So3 { .. } => {
                let pm = mat_from_slice(p);
                let omega = pm.transpose() * mat_from_slice(v);
                so3::write_mat(&(pm * (omega - omega.transpose()) * 0.5), out);
            }
            Manifold::Euclidean { .. } => out.copy_from_slice(v),
        }
    }

    pub fn project_tangent(&self, p: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        self.project_tangent_into(p, v, &mut out);
        out
    }

    /// Deterministic orthonormal basis of the tangent space at `p`.
    pub fn tangent_basis(&self, p: &[f64]) -> Vec<Vec<f64>> {
        match *self {
            Manifold::Sphere { .. } => sphere::tangent_basis(p),
            Manifold::So3 { .. } => {
                // p·ι(e_k)/√2 has unit norm in stored coordinates for both metrics.
                let pm = mat_from_slice(p);
                (0..3)
                    .map(|k| {
                        let mut e = [0.0; 3];
                        e[k] = 1.0;
                        mat_to_vec(&(pm * iota(e) * std::f64::consts::FRAC_1_SQRT_2))
                    })
                    .collect()
            }
            Manifold::Euclidean { dim } => (0..dim)
                .map(|k| {
                    let mut e = vec![0.0; dim];
                    e[k] = 1.0;
                    e
                })
                .collect(),
        }
    }

    /// Stored coordinates of an ambient tangent vector (identity except for the
    /// SO(3) angle metric).
    pub fn coords_from_ambient(&self, v: &[f64]) -> Vec<f64> {
        match *self {
            Manifold::So3 { metric } => v.iter().map(|x| x * metric.coord_scale()).collect(),
            _ => v.to_vec(),
        }
    }

    /// Validated point constructor.
    pub fn point(&self, coords: Vec<f64>) -> Result<ManifoldPoint> {
        self.check_point(&coords, POINT_TOL)?;
        Ok(ManifoldPoint(coords))
    }

    pub fn tangent(&self, base: &ManifoldPoint, coords: Vec<f64>) -> Result<TangentVector> {
        self.check_tangent(base, &coords, POINT_TOL)?;
        Ok(TangentVector {
            base: base.clone(),
            coords,
        })
    }

    pub fn exp_map(&self, p: &ManifoldPoint, v: &TangentVector) -> Result<ManifoldPoint> {
        self.check_len(p, "base point")?;
        self.check_len(&v.coords, "tangent vector")?;
        if v.base.coords() != p.coords() {
            return Err(Error::InvalidInput(
                "tangent vector is based at a different point".into(),
            ));
        }
        Ok(ManifoldPoint(self.exp(p, &v.coords)))
    }

    pub fn log_map(&self, p: &ManifoldPoint, q: &ManifoldPoint) -> Result<TangentVector> {
        Ok(TangentVector {
            base: p.clone(),
            coords: self.log(p, q)?,
        })
    }

    pub fn project_point(&self, x: &[f64]) -> Result<ManifoldPoint> {
        Ok(ManifoldPoint(self.project(x)?))
    }

    pub fn tangent_basis_at(&self, p: &ManifoldPoint) -> Vec<TangentVector> {
        self.tangent_basis(p)
            .into_iter()
            .map(|coords| TangentVector {
                base: p.clone(),
                coords,
            })
            .collect()
    }
}
