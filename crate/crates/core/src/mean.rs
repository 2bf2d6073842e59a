//! Local-linear Fréchet mean curve.
//!
//! At each time `t` the estimate minimizes the double-weighted Fréchet
//! function `Q_n(y, t) = Σ_i w_i Σ_j ω̂_ij(t) d²(Y_ij, y)`. The local-linear
//! weights can be negative, so there is no closed-form average; we run
//! Riemannian gradient descent with Armijo backtracking. The Riemannian
//! gradient of `d²(Y, y)` in `y` is `−2 Log_y(Y)`.

use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::geometry::Manifold;
use crate::smoothing::{self, LocalCoefficients, PooledDesign, WeightScheme};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerOptions {
    pub max_iter: usize,
    pub initial_step: f64,
    pub shrink: f64,
    pub armijo_c: f64,
    /// Stop when `|grad| ≤ grad_tol · (1 + |Q|)`.
    pub grad_tol: f64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            // The Hessian of Q_n is 2·I in flat space (local weights sum to 1),
            // so a half step is the Newton step there.
            initial_step: 0.5,
            shrink: 0.5,
            armijo_c: 1e-4,
            grad_tol: 1e-8,
        }
    }
}

/// A weighted sum of squared distances to a fixed set of observations.
struct LocalProblem<'a> {
    manifold: Manifold,
    design: &'a PooledDesign,
    local: LocalCoefficients,
}

impl LocalProblem<'_> {
    fn terms(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.local
            .range
            .clone()
            .zip(&self.local.coefs)
            .filter(|(_, c)| **c != 0.0)
            .map(|(k, &c)| (self.design.point(k), c))
    }

    /// Objective value and the sum of absolute contributions (rounding scale).
    fn objective(&self, y: &[f64]) -> (f64, f64) {
        let mut q = 0.0;
        let mut qabs = 0.0;
        for (p, c) in self.terms() {
            let d = self.manifold.dist_unchecked(p, y);
            q += c * d * d;
            qabs += c.abs() * d * d;
        }
        (q, qabs)
    }

    fn gradient(&self, y: &[f64], out: &mut [f64], scratch: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|g| *g = 0.0);
        for (p, c) in self.terms() {
            self.manifold.log_into(y, p, scratch)?;
            for (g, l) in out.iter_mut().zip(scratch.iter()) {
                *g -= 2.0 * c * l;
            }
        }
        Ok(())
    }

    /// Extrinsic weighted mean projected to the manifold; falls back to the
    /// most heavily weighted observation when the projection degenerates.
    fn extrinsic_start(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.design.dim()];
        for (p, c) in self.terms() {
            acc.iter_mut().zip(p).for_each(|(a, x)| *a += c * x);
        }
        self.manifold.project(&acc).unwrap_or_else(|_| {
            self.terms()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(p, _)| p.to_vec())
                .unwrap_or(acc)
        })
    }
}

#[derive(Debug, Clone)]
pub struct MeanFit {
    pub point: Vec<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// Objective value at every accepted iterate, starting with the initial point.
    pub history: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `Q_n(y, t)` under bandwidth `h`.
pub fn frechet_objective(
    manifold: Manifold,
    y: &[f64],
    t: f64,
    h: f64,
    design: &PooledDesign,
) -> Result<f64> {
    manifold.check_point(y, 1e-8)?;
    let local = smoothing::local_coefficients(t, h, design)?;
    Ok(LocalProblem {
        manifold,
        design,
        local,
    }
    .objective(y)
    .0)
}

/// Minimize `Q_n(·, t)` starting from `init` (or the projected extrinsic mean).
pub fn estimate_mean_at(
    manifold: Manifold,
    t: f64,
    h: f64,
    design: &PooledDesign,
    init: Option<&[f64]>,
    opts: &OptimizerOptions,
) -> Result<MeanFit> {
    let local = smoothing::local_coefficients(t, h, design)?;
    let problem = LocalProblem {
        manifold,
        design,
        local,
    };
    let dim = design.dim();
    let mut y = match init {
        Some(p) => p.to_vec(),
        None => problem.extrinsic_start(),
    };
    let mut grad = vec![0.0; dim];
    let mut scratch = vec![0.0; dim];
    let mut step_dir = vec![0.0; dim];
    let mut candidate = vec![0.0; dim];

    let (mut q, mut qabs) = problem.objective(&y);
    problem.gradient(&y, &mut grad, &mut scratch)?;
    let mut history = vec![q];
    for iter in 0..=opts.max_iter {
        let gnorm = norm(&grad);
        if gnorm <= opts.grad_tol * (1.0 + q.abs()) {
            return Ok(MeanFit {
                point: y,
                objective: q,
                grad_norm: gnorm,
                iterations: iter,
                history,
            });
        }
        if iter == opts.max_iter {
            break;
        }
        let slack = 4.0 * f64::EPSILON * qabs;
        let mut step = opts.initial_step;
        let mut accepted = false;
        while step > 1e-12 {
            step_dir.iter_mut().zip(&grad).for_each(|(s, g)| *s = -step * g);
            manifold.exp_into(&y, &step_dir, &mut candidate);
            let (qn, qabs_n) = problem.objective(&candidate);
            if qn <= q - opts.armijo_c * step * gnorm * gnorm + slack {
                std::mem::swap(&mut y, &mut candidate);
                q = qn;
                qabs = qabs_n;
                accepted = true;
                break;
            }
            step *= opts.shrink;
        }
        if !accepted {
            // Line search stalled at rounding level; accept the iterate when the
            // first-order condition already holds to working precision.
            if gnorm <= 1e-6 {
                return Ok(MeanFit {
                    point: y,
                    objective: q,
                    grad_norm: gnorm,
                    iterations: iter,
                    history,
                });
            }
            break;
        }
        history.push(q);
        problem.gradient(&y, &mut grad, &mut scratch).map_err(|e| match e {
            Error::CutLocus(msg) => Error::CutLocus(format!("mean at t={t}: {msg}")),
            other => other,
        })?;
    }
    Err(Error::OptimizationFailure {
        t,
        iterations: history.len() - 1,
        grad_norm: norm(&grad),
        last: y,
    })
}

/// Fréchet mean evaluated on a working grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanCurve {
    pub manifold: Manifold,
    pub grid: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub bandwidth: f64,
    pub scheme: WeightScheme,
}

impl MeanCurve {
    /// Geodesic interpolation between the two bracketing grid nodes.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let lo = self.grid[0];
        let hi = *self.grid.last().unwrap_or(&lo);
        let slack = 1e-12 * (hi - lo).abs().max(1.0);
        if !(t >= lo - slack && t <= hi + slack) {
            return Err(Error::OutOfDomain { t, lo, hi });
        }
        let t = t.clamp(lo, hi);
        let b = self.grid.partition_point(|&g| g < t);
        if b < self.grid.len() && self.grid[b] == t {
            return Ok(self.points[b].clone());
        }
        let a = b - 1;
        let frac = (t - self.grid[a]) / (self.grid[b] - self.grid[a]);
        let v: Vec<f64> = self
            .manifold
            .log(&self.points[a], &self.points[b])?
            .into_iter()
            .map(|x| x * frac)
            .collect();
        Ok(self.manifold.exp(&self.points[a], &v))
    }
}

pub fn eval_mean(curve: &MeanCurve, t: f64) -> Result<Vec<f64>> {
    curve.eval(t)
}

/// Mean curve on `grid`. Each grid point is warm-started from the previous
/// solution; the first from the projected extrinsic mean.
pub fn estimate_mean_curve(
    data: &LongitudinalDataset,
    h: f64,
    scheme: WeightScheme,
    grid: &[f64],
    opts: &OptimizerOptions,
) -> Result<MeanCurve> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput("grid must be nonempty and strictly increasing".into()));
    }
    let manifold = data.manifold();
    let weights = smoothing::mean_weights(scheme, &data.counts(), h)?;
    let design = PooledDesign::new(data, &weights)?;
    let mut points = Vec::with_capacity(grid.len());
    let mut failures = Vec::new();
    let mut prev: Option<Vec<f64>> = None;
    for (g, &t) in grid.iter().enumerate() {
        match estimate_mean_at(manifold, t, h, &design, prev.as_deref(), opts) {
            Ok(fit) => {
                prev = Some(fit.point.clone());
                points.push(fit.point);
            }
            Err(e) => {
                failures.push((g, e.to_string()));
                prev = None;
                points.push(Vec::new());
            }
        }
    }
    if !failures.is_empty() {
        return Err(Error::Aggregate {
            what: "mean curve".into(),
            failures,
        });
    }
    Ok(MeanCurve {
        manifold,
        grid: grid.to_vec(),
        points,
        bandwidth: h,
        scheme,
    })
}
