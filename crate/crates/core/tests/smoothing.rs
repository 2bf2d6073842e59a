mod common;

use proptest::prelude::*;
use rpace::data::uniform_grid;
use rpace::mean::OptimizerOptions;
use rpace::simgen::{generate, replicate_rng, ScenarioConfig, SimManifold};
use rpace::smoothing::{
    cov_weights, default_bandwidth_grid, gcv_bandwidth, kernel_h, local_coefficients, mean_weights,
    PooledDesign, WeightScheme,
};

const SCHEMES: [WeightScheme; 3] = [WeightScheme::Obs, WeightScheme::Subj, WeightScheme::Intm];

proptest! {
    #![proptest_config(ProptestConfig { cases: 512, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn weights_are_normalized(counts in prop::collection::vec(1usize..30, 1..60), h in 0.01f64..2.0) {
        for scheme in SCHEMES {
            let w = mean_weights(scheme, &counts, h).unwrap();
            let total: f64 = counts.iter().zip(&w).map(|(&m, w)| m as f64 * w).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            match cov_weights(scheme, &counts, h) {
                Ok(v) => {
                    let total: f64 = counts
                        .iter()
                        .zip(&v)
                        .map(|(&m, v)| (m * (m - 1)) as f64 * v)
                        .sum();
                    prop_assert!((total - 1.0).abs() <= 1e-12);
                    for (&m, v) in counts.iter().zip(&v) {
                        if m < 2 {
                            prop_assert_eq!(*v, 0.0);
                        }
                    }
                }
                Err(_) => prop_assert!(counts.iter().all(|&m| m < 2)),
            }
        }
    }

    #[test]
    fn local_weights_reproduce_lines(seed in 0u64..10_000, t in 0.0f64..1.0, h in 0.15f64..0.8) {
        let data = common::scalar_instance(seed, 25, 5).dataset();
        for scheme in SCHEMES {
            let w = mean_weights(scheme, &data.counts(), h).unwrap();
            let design = PooledDesign::new(&data, &w).unwrap();
            let Ok(local) = local_coefficients(t, h, &design) else { continue };
            let times = design.times();
            let s0: f64 = local.coefs.iter().sum();
            let s1: f64 = local.range.clone().zip(&local.coefs).map(|(k, c)| c * (times[k] - t)).sum();
            prop_assert!((s0 - 1.0).abs() <= 1e-10);
            prop_assert!(s1.abs() <= 1e-10);
        }
    }
}

/// Closed-form local-linear fit at `t` from the weighted normal equations.
fn wls_fit(times: &[f64], y: &[f64], w: &[f64], t: f64, h: f64) -> f64 {
    let mut a = vec![vec![0.0; 2]; 2];
    let mut b = vec![0.0; 2];
    for ((&s, &v), &wk) in times.iter().zip(y).zip(w) {
        let k = wk * kernel_h(s - t, h);
        let x = [1.0, s - t];
        for r in 0..2 {
            for c in 0..2 {
                a[r][c] += k * x[r] * x[c];
            }
            b[r] += k * x[r] * v;
        }
    }
    common::solve(a, b)[0]
}

#[test]
fn local_weights_match_weighted_least_squares() {
    let data = common::scalar_instance(21, 30, 6).dataset();
    for scheme in SCHEMES {
        for h in [0.1, 0.2, 0.45] {
            let w = mean_weights(scheme, &data.counts(), h).unwrap();
            let design = PooledDesign::new(&data, &w).unwrap();
            let times = design.times().to_vec();
            let y: Vec<f64> = (0..design.len()).map(|k| design.point(k)[0]).collect();
            let wk: Vec<f64> = (0..design.len()).map(|k| design.weight(k)).collect();
            for t in uniform_grid(0.05, 0.95, 19) {
                let local = local_coefficients(t, h, &design).unwrap();
                let fit: f64 = local.range.clone().zip(&local.coefs).map(|(k, c)| c * y[k]).sum();
                let oracle = wls_fit(&times, &y, &wk, t, h);
                assert!((fit - oracle).abs() <= 1e-9, "{scheme:?} h={h} t={t}: {fit} vs {oracle}");
            }
        }
    }
}

fn sphere_dist(p: &[f64], q: &[f64]) -> f64 {
    let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    let cross = [
        p[1] * q[2] - p[2] * q[1],
        p[2] * q[0] - p[0] * q[2],
        p[0] * q[1] - p[1] * q[0],
    ];
    cross.iter().map(|x| x * x).sum::<f64>().sqrt().atan2(dot)
}

#[test]
fn gcv_curve_matches_independent_evaluation() {
    let cfg = ScenarioConfig::scenario(1, SimManifold::S2);
    let (data, _) = generate(&cfg, &mut replicate_rng(cfg.seed, 0)).unwrap();
    let grid = uniform_grid(0.0, 1.0, 51);
    let candidates = default_bandwidth_grid(&data);
    let gcv = gcv_bandwidth(&data, WeightScheme::Obs, &candidates, &grid, &OptimizerOptions::default()).unwrap();
    assert!((0.05..=0.5).contains(&gcv.bandwidth), "{}", gcv.bandwidth);
    let n_total = data.total_observations() as f64;
    for c in &gcv.candidates {
        let (Some(score), Some(fitted)) = (c.score, c.fitted.as_ref()) else { continue };
        let mut rss = 0.0;
        let mut k = 0;
        for s in data.subjects() {
            for j in 0..s.times.len() {
                let d = sphere_dist(&fitted[3 * k..3 * k + 3], &s.points[3 * j..3 * j + 3]);
                rss += d * d;
                k += 1;
            }
        }
        let k0 = 0.75 / c.bandwidth;
        let oracle = rss / (1.0 - k0 / n_total).powi(2);
        assert!((score - oracle).abs() <= 1e-12 * oracle.max(1.0), "{score} vs {oracle}");
    }
    let best = gcv
        .candidates
        .iter()
        .filter_map(|c| c.score.map(|s| (c.bandwidth, s)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    assert_eq!(best.0, gcv.bandwidth);
}

#[test]
fn bandwidth_grid_is_log_spaced() {
    let data = common::scalar_instance(5, 40, 6).dataset();
    let grid = default_bandwidth_grid(&data);
    assert_eq!(grid.len(), 10);
    let ratios: Vec<f64> = grid.windows(2).map(|w| w[1] / w[0]).collect();
    for r in &ratios {
        assert!((r - ratios[0]).abs() <= 1e-9);
    }
    let (lo, hi) = data.time_range();
    assert!((grid[9] - 0.5 * (hi - lo)).abs() <= 1e-12);
}
