//! Seeded geometry property suite shared by the geometry tests and the
//! acceptance run.

use std::cell::RefCell;

use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rpace::geometry::{expm_so3, mat_from_slice, mat_to_vec, rotation_between};
use rpace::Manifold;

pub const ROUND_TRIP_TOL: f64 = 1e-8;
pub const ISOMETRY_TOL: f64 = 1e-8;
pub const BI_INVARIANCE_TOL: f64 = 1e-9;
pub const IDEMPOTENCE_TOL: f64 = 1e-12;

/// A deterministic proptest runner with `cases` cases.
pub fn seeded_runner(cases: u32, seed: u8) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        rng_algorithm: RngAlgorithm::ChaCha,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::from_seed(RngAlgorithm::ChaCha, &[seed; 32]))
}

/// Point on `m` from uniform draws in `[-1, 1]`.
pub fn point_from(m: Manifold, raw: &[f64]) -> Vec<f64> {
    let d = m.ambient_dim();
    match m {
        Manifold::Sphere { .. } => {
            let n = raw[..d].iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-3 {
                let mut e = vec![0.0; d];
                e[0] = 1.0;
                e
            } else {
                raw[..d].iter().map(|x| x / n).collect()
            }
        }
        Manifold::So3 { .. } => {
            let w = Vector3::new(raw[0], raw[1], raw[2]);
            let n = w.norm().max(1e-12);
            mat_to_vec(&expm_so3(&(w * (std::f64::consts::PI * raw[3].abs() / n))))
        }
        Manifold::Euclidean { .. } => raw[..d].iter().map(|x| 5.0 * x).collect(),
    }
}

/// Tangent vector at `p` with coordinates `coef` in the orthonormal basis,
/// rescaled to norm `r`.
pub fn tangent_from(m: Manifold, p: &[f64], coef: &[f64], r: f64) -> Vec<f64> {
    let basis = m.tangent_basis(p);
    let c = &coef[..basis.len()];
    let n = c.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let mut v = vec![0.0; m.ambient_dim()];
    for (ck, b) in c.iter().zip(&basis) {
        v.iter_mut().zip(b).for_each(|(x, y)| *x += r * ck / n * y);
    }
    v
}

/// Norm range for round-trip draws: below the injectivity radius minus 0.1.
pub fn radius_limit(m: Manifold) -> f64 {
    if m.is_flat() {
        10.0
    } else {
        m.injectivity_radius() - 0.1
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Worst errors observed across a suite run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GeometryReport {
    pub round_trip: f64,
    pub inverse_round_trip: f64,
    pub isometry: f64,
    pub bi_invariance: f64,
    pub idempotence: f64,
    pub cases: u32,
}

fn check(ok: bool, what: &str, err: f64) -> Result<(), TestCaseError> {
    if ok {
        Ok(())
    } else {
        Err(TestCaseError::fail(format!("{what}: error {err:e}")))
    }
}

/// Run the round-trip, isometry, bi-invariance (SO(3) only) and projection
/// idempotence checks on `cases` seeded draws.
pub fn geometry_suite(m: Manifold, cases: u32, seed: u8) -> Result<GeometryReport, String> {
    let report = RefCell::new(GeometryReport {
        cases,
        ..GeometryReport::default()
    });
    let draws = (
        prop::collection::vec(-1.0f64..1.0, 10),
        prop::collection::vec(-1.0f64..1.0, 10),
        prop::collection::vec(-1.0f64..1.0, 10),
        prop::collection::vec(-1.0f64..1.0, 10),
        0.0f64..1.0,
        prop::bool::weighted(0.05),
    );
    let mut runner = seeded_runner(cases, seed);
    let result = runner.run(&draws, |(rp, rv, rr, rx, frac, tiny)| {
        let mut rep = report.borrow_mut();
        let p = point_from(m, &rp);
        let r = if tiny { 1e-9 * frac } else { frac * radius_limit(m) };
        let v = tangent_from(m, &p, &rv, r);
        let q = m.exp(&p, &v);
        let back = m.log(&p, &q).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let e = diff(&back, &v);
        rep.round_trip = rep.round_trip.max(e);
        check(e <= ROUND_TRIP_TOL, "log(exp(v)) != v", e)?;

        let again = m.exp(&p, &back);
        let e = diff(&again, &q);
        rep.inverse_round_trip = rep.inverse_round_trip.max(e);
        check(e <= 1e-9, "exp(log(q)) != q", e)?;

        let dist = m.dist(&p, &q).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let e = (dist - norm(&v)).abs();
        rep.isometry = rep.isometry.max(e);
        check(e <= ISOMETRY_TOL, "dist(p, exp(v)) != |v|", e)?;

        if let Manifold::So3 { .. } = m {
            let g = mat_from_slice(&point_from(m, &rr));
            let (pm, qm) = (mat_from_slice(&p), mat_from_slice(&q));
            let left = m
                .dist(&mat_to_vec(&(g * pm)), &mat_to_vec(&(g * qm)))
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let right = m
                .dist(&mat_to_vec(&(pm * g)), &mat_to_vec(&(qm * g)))
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let e = (left - dist).abs().max((right - dist).abs());
            rep.bi_invariance = rep.bi_invariance.max(e);
            check(e <= BI_INVARIANCE_TOL, "distance not bi-invariant", e)?;
        }

        let x: Vec<f64> = match m {
            Manifold::So3 { .. } => {
                let noise = Matrix3::from_row_slice(&rx[..9]) * 0.3;
                mat_to_vec(&(mat_from_slice(&p) + noise))
            }
            _ => p.iter().zip(&rx).map(|(a, b)| a + 0.5 * b).collect(),
        };
        if norm(&x) > 1e-3 {
            let once = m.project(&x).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let twice = m.project(&once).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let e = diff(&once, &twice);
            rep.idempotence = rep.idempotence.max(e);
            check(e <= IDEMPOTENCE_TOL, "project not idempotent", e)?;
            m.check_point(&once, 1e-9)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
        }
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    Ok(report.into_inner())
}

/// `rotation_between` on random pairs: maps `p` to `q` and stays orthogonal.
pub fn rotation_between_suite(dim: usize, cases: u32, seed: u8) -> Result<(), String> {
    let m = Manifold::sphere(dim);
    let mut runner = seeded_runner(cases, seed);
    runner
        .run(
            &(
                prop::collection::vec(-1.0f64..1.0, 10),
                prop::collection::vec(-1.0f64..1.0, 10),
            ),
            |(a, b)| {
                let (p, q) = (point_from(m, &a), point_from(m, &b));
                if diff(&p, &q.iter().map(|x| -x).collect::<Vec<_>>()) < 1e-6 {
                    return Ok(());
                }
                let r = rotation_between(&p, &q).map_err(|e| TestCaseError::fail(e.to_string()))?;
                let rp = &r * nalgebra::DVector::from_column_slice(&p);
                let e = diff(rp.as_slice(), &q);
                check(e <= 1e-9, "R p != q", e)?;
                let gram = r.transpose() * &r - nalgebra::DMatrix::identity(dim + 1, dim + 1);
                check(gram.norm() <= 1e-9, "R not orthogonal", gram.norm())
            },
        )
        .map_err(|e| e.to_string())
}
