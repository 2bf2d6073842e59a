mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use common::Synthetic;
use rpace::covariance::{
    covariance_surface, eigendecompose, log_residuals, smooth_covariance_at, CovarianceSurface, LogResiduals,
    SubjectResiduals,
};
use rpace::data::{trapezoid_weights, uniform_grid};
use rpace::simgen::{generate, replicate_rng, ScenarioConfig, SimManifold};
use rpace::smoothing::{cov_weights, WeightScheme};

fn random_times(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(1..=6);
            let mut t: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            t.sort_by(f64::total_cmp);
            t
        })
        .collect()
}

#[test]
fn smoother_reproduces_constant_and_affine_surfaces() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for d in [1, 2, 3, 4, 9] {
        let times = random_times(&mut rng, 60);
        let counts: Vec<usize> = times.iter().map(Vec::len).collect();
        let c: Vec<f64> = (0..d * d).map(|_| rng.random::<f64>() - 0.5).collect();
        let a: Vec<f64> = (0..d * d).map(|_| rng.random::<f64>() - 0.5).collect();
        let b: Vec<f64> = (0..d * d).map(|_| rng.random::<f64>() - 0.5).collect();
        let constant = Synthetic {
            dim: d,
            times: times.clone(),
            f: {
                let c = c.clone();
                Box::new(move |_, _| c.clone())
            },
        };
        let affine = Synthetic {
            dim: d,
            times,
            f: {
                let (a, b) = (a.clone(), b.clone());
                Box::new(move |s, t| a.iter().zip(&b).map(|(x, y)| x * s + y * t).collect())
            },
        };
        for scheme in [WeightScheme::Obs, WeightScheme::Subj, WeightScheme::Intm] {
            let h = 0.3;
            let v = cov_weights(scheme, &counts, h).unwrap();
            for s in uniform_grid(0.1, 0.9, 5) {
                for t in uniform_grid(0.1, 0.9, 5) {
                    let got = smooth_covariance_at(s, t, h, &constant, &v).unwrap();
                    assert!(common::max_diff(&got, &c) <= 1e-10, "D={d}");
                    let got = smooth_covariance_at(s, t, h, &affine, &v).unwrap();
                    let want: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * s + y * t).collect();
                    assert!(common::max_diff(&got, &want) <= 1e-8, "D={d}");
                }
            }
        }
    }
}

#[test]
fn fast_surface_reproduces_constant_residual_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for d in [1, 2, 3, 4, 9] {
        let u: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        let subjects = random_times(&mut rng, 50)
            .into_iter()
            .enumerate()
            .map(|(i, times)| SubjectResiduals {
                id: i.to_string(),
                vectors: times.iter().flat_map(|_| u.clone()).collect(),
                times,
            })
            .collect();
        let res = LogResiduals {
            dim: d,
            intrinsic_dim: d,
            subjects,
        };
        let v = cov_weights(WeightScheme::Obs, &res.counts(), 0.35).unwrap();
        let grid = uniform_grid(0.1, 0.9, 9);
        let surface = covariance_surface(&res, 0.35, &v, &grid).unwrap();
        let uu: Vec<f64> = (0..d * d).map(|k| u[k / d] * u[k % d]).collect();
        for a in 0..grid.len() {
            for b in 0..grid.len() {
                assert!(common::max_diff(surface.get(a, b), &uu) <= 1e-10, "D={d}");
            }
        }
    }
}

#[test]
fn scalar_surface_and_noise_match_oracle() {
    let data = common::scalar_instance(17, 20, 4);
    let grid = uniform_grid(0.0, 1.0, 21);
    let oracle = common::scalar_pace(&data, &grid, 0.25, 0.5, 2);
    let fit = rpace::fit(&data.dataset(), &common::scalar_config(21, 0.25, 0.5, 2)).unwrap();
    for a in 0..21 {
        for b in 0..21 {
            assert!((fit.covariance.surface.get(a, b)[0] - oracle.cov[a][b]).abs() <= 1e-9);
        }
    }
    assert!((fit.covariance.sigma2.value - oracle.sigma2).abs() <= 1e-9);
}

/// `Γ(s,t) = Σ_r f_r(s) f_r(t)ᵀ` for a few random smooth `f_r`.
fn psd_surface(grid: &[f64], d: usize, rank: usize, seed: u64) -> CovarianceSurface {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coef: Vec<Vec<[f64; 3]>> = (0..rank)
        .map(|_| (0..d).map(|_| [rng.random(), rng.random(), rng.random()]).collect())
        .collect();
    let f = |r: usize, t: f64| -> Vec<f64> {
        coef[r]
            .iter()
            .map(|c| c[0] + c[1] * (3.0 * t).sin() + c[2] * t * t - 0.5)
            .collect()
    };
    CovarianceSurface::from_fn(grid, d, |a, b| {
        let mut m = vec![0.0; d * d];
        for r in 0..rank {
            let (x, y) = (f(r, grid[a]), f(r, grid[b]));
            for i in 0..d {
                for j in 0..d {
                    m[i * d + j] += x[i] * y[j];
                }
            }
        }
        m
    })
}

#[test]
fn eigendecomposition_identities() {
    let grid = uniform_grid(0.0, 1.0, 31);
    let w = trapezoid_weights(&grid);
    for (d, rank) in [(1, 2), (3, 4), (4, 3)] {
        let surface = psd_surface(&grid, d, rank, d as u64);
        let pairs = eigendecompose(&surface, &w).unwrap();
        assert!(pairs.len() <= rank * 3);
        for p in pairs.windows(2) {
            assert!(p[0].value >= p[1].value);
        }
        let trace: f64 = surface
            .diagonal()
            .iter()
            .zip(&w)
            .map(|(m, wa)| wa * (0..d).map(|i| m[i * d + i]).sum::<f64>())
            .sum();
        let total: f64 = pairs.iter().map(|p| p.value).sum();
        assert!((trace - total).abs() <= 1e-8, "{trace} vs {total}");

        for (j, pj) in pairs.iter().enumerate() {
            for (k, pk) in pairs.iter().enumerate() {
                let ip: f64 = (0..grid.len())
                    .map(|a| w[a] * (0..d).map(|i| pj.function[a * d + i] * pk.function[a * d + i]).sum::<f64>())
                    .sum();
                assert!((ip - if j == k { 1.0 } else { 0.0 }).abs() <= 1e-8);
            }
        }

        let (mut resid, mut norm) = (0.0, 0.0);
        for a in 0..grid.len() {
            for b in 0..grid.len() {
                let g = surface.get(a, b);
                for i in 0..d {
                    for j in 0..d {
                        let approx: f64 = pairs
                            .iter()
                            .map(|p| p.value * p.function[a * d + i] * p.function[b * d + j])
                            .sum();
                        let x = g[i * d + j];
                        resid += w[a] * w[b] * (x - approx).powi(2);
                        norm += w[a] * w[b] * x * x;
                    }
                }
            }
        }
        assert!(resid.sqrt() <= 1e-8 * norm.sqrt());
    }
}

#[test]
fn sphere_residuals_and_surface_respect_geometry() {
    let cfg = ScenarioConfig::scenario(1, SimManifold::S2);
    let (data, _) = generate(&cfg, &mut replicate_rng(9, 0)).unwrap();
    let fit = rpace::fit(&data, &rpace::FitConfig::default()).unwrap();
    let m = data.manifold();
    let res = log_residuals(&data, &fit.mean).unwrap();
    for (sub, r) in data.subjects().iter().zip(&res.subjects) {
        for (j, &t) in sub.times.iter().enumerate() {
            let mu = fit.mean.eval(t).unwrap();
            let l = r.vector(j, 3);
            let norm = l.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - m.dist(&mu, sub.point(j, 3)).unwrap()).abs() <= 1e-9);
        }
    }
    let cov = &fit.covariance;
    assert!(cov.tangent_projected);
    for a in 0..cov.grid.len() {
        for b in 0..cov.grid.len() {
            let g = cov.surface.get(a, b);
            let gt = cov.surface.get(b, a);
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(g[i * 3 + j], gt[j * 3 + i]);
                }
            }
            let (ma, mb) = (&fit.mean_grid[a], &fit.mean_grid[b]);
            for j in 0..3 {
                let left: f64 = (0..3).map(|i| ma[i] * g[i * 3 + j]).sum();
                let right: f64 = (0..3).map(|i| g[j * 3 + i] * mb[i]).sum();
                assert!(left.abs() <= 1e-10 && right.abs() <= 1e-10);
            }
        }
    }
    for k in 0..cov.n_components() {
        for a in 0..cov.grid.len() {
            m.check_tangent(&fit.mean_grid[a], cov.eigenfunction_node(k, a), 1e-9).unwrap();
        }
    }
}
