//! Sparse longitudinal observations of a manifold-valued process.

use crate::error::{Error, Result};
use crate::geometry::{Manifold, POINT_TOL};

/// One subject's irregular observation sequence; `points` holds `m × D`
/// coordinates in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub times: Vec<f64>,
    pub points: Vec<f64>,
}

impl Subject {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn point(&self, j: usize, dim: usize) -> &[f64] {
        &self.points[j * dim..(j + 1) * dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    manifold: Manifold,
    subjects: Vec<Subject>,
}

impl LongitudinalDataset {
    /// Validates every observation and sorts each subject by time.
    pub fn new(manifold: Manifold, subjects: Vec<Subject>) -> Result<Self> {
        let dim = manifold.ambient_dim();
        let mut offenders = Vec::new();
        let mut sorted = Vec::with_capacity(subjects.len());
        for s in subjects {
            if s.times.is_empty() {
                offenders.push(format!("subject {} has no observations", s.id));
                continue;
            }
            if s.points.len() != s.times.len() * dim {
                offenders.push(format!(
                    "subject {} has {} coordinates for {} times (D = {dim})",
                    s.id,
                    s.points.len(),
                    s.times.len()
                ));
                continue;
            }
            let mut order: Vec<usize> = (0..s.times.len()).collect();
            order.sort_by(|&a, &b| s.times[a].total_cmp(&s.times[b]));
            let times: Vec<f64> = order.iter().map(|&j| s.times[j]).collect();
            let mut points = Vec::with_capacity(s.points.len());
            for &j in &order {
                points.extend_from_slice(&s.points[j * dim..(j + 1) * dim]);
            }
            for (j, t) in times.iter().enumerate() {
                if !t.is_finite() {
                    offenders.push(format!("subject {} has a non-finite time", s.id));
                }
                if let Err(e) = manifold.check_point(&points[j * dim..(j + 1) * dim], POINT_TOL) {
                    offenders.push(format!("subject {} at t={t}: {e}", s.id));
                }
            }
            sorted.push(Subject {
                id: s.id,
                times,
                points,
            });
        }
        if !offenders.is_empty() {
            return Err(Error::Validation { offenders });
        }
        if sorted.is_empty() {
            return Err(Error::InvalidInput("dataset has no subjects".into()));
        }
        Ok(Self {
            manifold,
            subjects: sorted,
        })
    }

    pub fn manifold(&self) -> Manifold {
        self.manifold
    }

    pub fn dim(&self) -> usize {
        self.manifold.ambient_dim()
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.subjects.iter().map(Subject::len).collect()
    }

    pub fn total_observations(&self) -> usize {
        self.subjects.iter().map(Subject::len).sum()
    }

    pub fn time_range(&self) -> (f64, f64) {
        self.subjects
            .iter()
            .flat_map(|s| s.times.iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
                (lo.min(t), hi.max(t))
            })
    }

    /// The same coordinates viewed as points of another manifold of equal
    /// ambient dimension (used by the extrinsic baseline).
    pub fn reinterpret(&self, manifold: Manifold) -> Result<Self> {
        if manifold.ambient_dim() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "cannot reinterpret D={} data as {manifold:?}",
                self.dim()
            )));
        }
        Self::new(manifold, self.subjects.clone())
    }
}

/// `n` equispaced points over `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// Composite trapezoid weights on an increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|i| {
            let left = if i > 0 { grid[i] - grid[i - 1] } else { 0.0 };
            let right = if i + 1 < n { grid[i + 1] - grid[i] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}
