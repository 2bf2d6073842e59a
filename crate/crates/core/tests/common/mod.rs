//! Shared fixtures and an independent scalar PACE implementation used as an
//! oracle for the Euclidean(1) pipeline.
#![allow(dead_code)]

pub mod geom;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rpace::covariance::RawCovariances;
use rpace::{LongitudinalDataset, Manifold, Subject};

/// Sparse scalar data: per subject, sorted times and values.
#[derive(Debug, Clone)]
pub struct ScalarData {
    pub times: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl ScalarData {
    pub fn dataset(&self) -> LongitudinalDataset {
        let subjects = self
            .times
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (t, y))| Subject {
                id: format!("s{i:02}"),
                times: t.clone(),
                points: y.clone(),
            })
            .collect();
        LongitudinalDataset::new(Manifold::euclidean(1), subjects).unwrap()
    }
}

/// `Y = sin(2πt) + ξ₁√2 cos(πt) + ξ₂√2 sin(πt) + ε` with `m_i ∈ {1..m_max}`.
pub fn scalar_instance(seed: u64, n: usize, m_max: usize) -> ScalarData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s1 = Normal::new(0.0, 1.0).unwrap();
    let s2 = Normal::new(0.0, 0.5).unwrap();
    let eps = Normal::new(0.0, 0.1).unwrap();
    let mut times = Vec::new();
    let mut values = Vec::new();
    for _ in 0..n {
        let m = rng.random_range(1..=m_max);
        let mut t: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        t.sort_by(f64::total_cmp);
        let (x1, x2) = (s1.sample(&mut rng), s2.sample(&mut rng));
        let r2 = std::f64::consts::SQRT_2;
        let pi = std::f64::consts::PI;
        let y = t
            .iter()
            .map(|&s| {
                (2.0 * pi * s).sin()
                    + x1 * r2 * (pi * s).cos()
                    + x2 * r2 * (pi * s).sin()
                    + eps.sample(&mut rng)
            })
            .collect();
        times.push(t);
        values.push(y);
    }
    ScalarData { times, values }
}

fn epan(u: f64) -> f64 {
    if u.abs() <= 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Cyclic Jacobi eigensolver for a symmetric matrix; eigenpairs sorted by
/// decreasing eigenvalue, eigenvectors as columns of the returned rows.
pub fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&c| (0..n).map(|r| v[r][c]).collect())
        .collect();
    (values, vectors)
}

fn interp(grid: &[f64], f: &[f64], t: f64) -> f64 {
    let g = grid.len();
    let a = grid.partition_point(|&x| x <= t).clamp(1, g - 1) - 1;
    let u = (t - grid[a]) / (grid[a + 1] - grid[a]);
    (1.0 - u) * f[a] + u * f[a + 1]
}

fn interp2(grid: &[f64], m: &[Vec<f64>], s: f64, t: f64) -> f64 {
    let col: Vec<f64> = m.iter().map(|row| interp(grid, row, t)).collect();
    interp(grid, &col, s)
}

#[derive(Debug, Clone)]
pub struct ScalarFit {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub eigenfunctions: Vec<Vec<f64>>,
    pub sigma2: f64,
    pub scores: Vec<Vec<f64>>,
    pub trajectories: Vec<Vec<f64>>,
}

/// Classical PACE with local-linear smoothers, observation weighting, a
/// trapezoid-quadrature eigenproblem and Gaussian-conditional scores.
pub fn scalar_pace(data: &ScalarData, grid: &[f64], h_mu: f64, h_gamma: f64, k: usize) -> ScalarFit {
    let g = grid.len();
    let obs: Vec<(f64, f64)> = data
        .times
        .iter()
        .zip(&data.values)
        .flat_map(|(t, y)| t.iter().copied().zip(y.iter().copied()))
        .collect();
    let mean: Vec<f64> = grid
        .iter()
        .map(|&t0| {
            let mut a = vec![vec![0.0; 2]; 2];
            let mut b = vec![0.0; 2];
            for &(t, y) in &obs {
                let w = epan((t - t0) / h_mu);
                let x = [1.0, t - t0];
                for r in 0..2 {
                    for c in 0..2 {
                        a[r][c] += w * x[r] * x[c];
                    }
                    b[r] += w * x[r] * y;
                }
            }
            solve(a, b)[0]
        })
        .collect();
    let resid: Vec<Vec<f64>> = data
        .times
        .iter()
        .zip(&data.values)
        .map(|(t, y)| t.iter().zip(y).map(|(&s, &v)| v - interp(grid, &mean, s)).collect())
        .collect();

    let mut raw = Vec::new();
    for (t, r) in data.times.iter().zip(&resid) {
        for j in 0..t.len() {
            for l in 0..t.len() {
                if j != l {
                    raw.push((t[j], t[l], r[j] * r[l]));
                }
            }
        }
    }
    let mut cov = vec![vec![0.0; g]; g];
    for a in 0..g {
        for b in 0..g {
            let mut m = vec![vec![0.0; 3]; 3];
            let mut rhs = vec![0.0; 3];
            for &(tj, tl, c) in &raw {
                let w = epan((tj - grid[a]) / h_gamma) * epan((tl - grid[b]) / h_gamma);
                let x = [1.0, tj - grid[a], tl - grid[b]];
                for r in 0..3 {
                    for q in 0..3 {
                        m[r][q] += w * x[r] * x[q];
                    }
                    rhs[r] += w * x[r] * c;
                }
            }
            cov[a][b] = solve(m, rhs)[0];
        }
    }
    for a in 0..g {
        for b in a + 1..g {
            let s = 0.5 * (cov[a][b] + cov[b][a]);
            cov[a][b] = s;
            cov[b][a] = s;
        }
    }

    let mut w = vec![0.0; g];
    for a in 0..g - 1 {
        let half = 0.5 * (grid[a + 1] - grid[a]);
        w[a] += half;
        w[a + 1] += half;
    }
    let scaled: Vec<Vec<f64>> = (0..g)
        .map(|a| (0..g).map(|b| w[a].sqrt() * cov[a][b] * w[b].sqrt()).collect())
        .collect();
    let (vals, vecs) = jacobi_eigen(scaled);
    let cutoff = (1e-12 * vals[0]).max(0.0);
    let mut eigenvalues = Vec::new();
    let mut eigenfunctions = Vec::new();
    for (l, v) in vals.iter().zip(&vecs) {
        if *l <= cutoff {
            continue;
        }
        let mut phi: Vec<f64> = v.iter().zip(&w).map(|(x, wa)| x / wa.sqrt()).collect();
        let big = phi.iter().copied().max_by(|x, y| x.abs().total_cmp(&y.abs())).unwrap();
        if big < 0.0 {
            phi.iter_mut().for_each(|x| *x = -*x);
        }
        eigenvalues.push(*l);
        eigenfunctions.push(phi);
    }

    let n = data.times.len() as f64;
    let mut sigma2 = 0.0;
    for (t, r) in data.times.iter().zip(&resid) {
        let acc: f64 = t.iter().zip(r).map(|(&s, &x)| x * x - interp2(grid, &cov, s, s)).sum();
        sigma2 += acc / (n * t.len() as f64);
    }
    let sigma2 = sigma2.max(1e-10);

    let expansion: Vec<Vec<f64>> = (0..g)
        .map(|a| {
            (0..g)
                .map(|b| {
                    eigenvalues
                        .iter()
                        .zip(&eigenfunctions)
                        .map(|(l, f)| l * f[a] * f[b])
                        .sum()
                })
                .collect()
        })
        .collect();
    let mut scores = Vec::new();
    let mut trajectories = Vec::new();
    for (t, r) in data.times.iter().zip(&resid) {
        let m = t.len();
        let sigma: Vec<Vec<f64>> = (0..m)
            .map(|j| {
                (0..m)
                    .map(|l| interp2(grid, &expansion, t[j], t[l]) + if j == l { sigma2 } else { 0.0 })
                    .collect()
            })
            .collect();
        let z = solve(sigma, r.clone());
        let xi: Vec<f64> = (0..k)
            .map(|c| {
                if c >= eigenvalues.len() {
                    return 0.0;
                }
                eigenvalues[c]
                    * t.iter()
                        .zip(&z)
                        .map(|(&s, zj)| interp(grid, &eigenfunctions[c], s) * zj)
                        .sum::<f64>()
            })
            .collect();
        let traj = (0..g)
            .map(|a| mean[a] + xi.iter().zip(&eigenfunctions).map(|(x, f)| x * f[a]).sum::<f64>())
            .collect();
        scores.push(xi);
        trajectories.push(traj);
    }
    ScalarFit {
        grid: grid.to_vec(),
        mean,
        cov,
        eigenvalues,
        eigenfunctions,
        sigma2,
        scores,
        trajectories,
    }
}

/// Fixed-bandwidth Euclidean(1) configuration matching `scalar_pace`.
pub fn scalar_config(g: usize, h_mu: f64, h_gamma: f64, k: usize) -> rpace::FitConfig {
    rpace::FitConfig {
        truncation: rpace::covariance::TruncationRule::Fixed(k),
        mean_bandwidth: Some(h_mu),
        cov_bandwidth: Some(h_gamma),
        grid_size: g,
        grid_range: Some((0.0, 1.0)),
        ..rpace::FitConfig::default()
    }
}

/// Largest absolute difference between two equal-length slices.
pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Compare the library pipeline with the oracle; returns the worst discrepancy
/// across mean, covariance, σ², eigenvalues, scores and trajectories.
pub fn oracle_discrepancy(fit: &rpace::FitResult, oracle: &ScalarFit) -> f64 {
    let g = oracle.grid.len();
    let mean: Vec<f64> = fit.mean_grid.iter().map(|p| p[0]).collect();
    let mut worst = max_diff(&mean, &oracle.mean);
    for a in 0..g {
        for b in 0..g {
            worst = worst.max((fit.covariance.surface.get(a, b)[0] - oracle.cov[a][b]).abs());
        }
    }
    worst = worst.max((fit.covariance.sigma2.value - oracle.sigma2).abs());
    let k = oracle.scores.first().map_or(0, Vec::len);
    worst = worst.max(max_diff(&fit.covariance.eigenvalues[..k], &oracle.eigenvalues[..k]));
    for (s, o) in fit.scores.iter().zip(&oracle.scores) {
        worst = worst.max(max_diff(s, o));
    }
    for (r, o) in fit.reconstructions.iter().zip(&oracle.trajectories) {
        worst = worst.max(max_diff(&r.trajectory, o));
    }
    worst
}

/// Raw covariances given by a function of the time pair.
pub struct Synthetic {
    pub dim: usize,
    pub times: Vec<Vec<f64>>,
    pub f: Box<dyn Fn(f64, f64) -> Vec<f64>>,
}

impl RawCovariances for Synthetic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_subjects(&self) -> usize {
        self.times.len()
    }

    fn times(&self, i: usize) -> &[f64] {
        &self.times[i]
    }

    fn raw_into(&self, i: usize, j: usize, l: usize, out: &mut [f64]) {
        out.copy_from_slice(&(self.f)(self.times[i][j], self.times[i][l]));
    }
}
