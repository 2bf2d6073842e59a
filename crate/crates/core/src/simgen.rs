//! Monte Carlo study: sparse longitudinal samples on S² and SO(3) with known
//! mean, eigenfunctions and scores, trajectory RMISE, and the replicated
//! comparison of the intrinsic fit against the extrinsic baseline.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceSurface, TruncationRule};
use crate::data::{trapezoid_weights, uniform_grid, LongitudinalDataset, Subject};
use crate::error::{Error, Result};
use crate::geometry::{expm_so3, iota, mat_to_vec, rotation_between, vee, Manifold, So3Metric};
use crate::pace::{self, FitConfig, FitResult};
use crate::smoothing::WeightScheme;

/// `ζ_k(t) = √2 cos(kπt)`.
pub fn cosine_basis(k: usize, t: f64) -> f64 {
    std::f64::consts::SQRT_2 * (k as f64 * PI * t).cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimManifold {
    S2,
    #[serde(rename = "SO3")]
    So3,
}

impl SimManifold {
    pub fn name(self) -> &'static str {
        match self {
            SimManifold::S2 => "S2",
            SimManifold::So3 => "SO3",
        }
    }
}

impl std::str::FromStr for SimManifold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s2" | "sphere" => Ok(SimManifold::S2),
            "so3" => Ok(SimManifold::So3),
            other => Err(Error::InvalidInput(format!("unknown simulation manifold {other:?}"))),
        }
    }
}

/// Normalization of the integrated squared error in RMISE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RmiseNorm {
    /// Divide by the ambient dimension `D`.
    #[default]
    Ambient,
    /// Divide by the intrinsic dimension `d`.
    Intrinsic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Scenario label (1–3 for the presets, 0 for custom designs).
    pub scenario: u32,
    pub manifold: SimManifold,
    pub so3_metric: So3Metric,
    pub n: usize,
    pub m_max: usize,
    /// `λ_k = lambda_base^(k/3)`.
    pub lambda_base: f64,
    pub sigma2: f64,
    pub n_components: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Evaluation and working grid size over `[0, 1]`.
    pub grid_size: usize,
    pub rmise_norm: RmiseNorm,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::scenario(1, SimManifold::S2)
    }
}

impl ScenarioConfig {
    /// Scenario 1: n=100, m_max=20; 2: n=100, m_max=5; 3: n=50, m_max=20.
    /// Other labels give a custom design starting from scenario 1.
    pub fn scenario(id: u32, manifold: SimManifold) -> Self {
        let (n, m_max) = match id {
            2 => (100, 5),
            3 => (50, 20),
            _ => (100, 20),
        };
        Self {
            scenario: id,
            manifold,
            so3_metric: So3Metric::Frobenius,
            n,
            m_max,
            lambda_base: 0.05,
            sigma2: 0.01,
            n_components: 20,
            replicates: 50,
            seed: 20240601,
            grid_size: 51,
            rmise_norm: RmiseNorm::Ambient,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.m_max < 1 || !(self.sigma2 >= 0.0) || self.grid_size < 2 {
            return Err(Error::InvalidInput(format!(
                "invalid scenario: n={}, m_max={}, sigma2={}, grid_size={}",
                self.n, self.m_max, self.sigma2, self.grid_size
            )));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Manifold {
        match self.manifold {
            SimManifold::S2 => Manifold::sphere(2),
            SimManifold::So3 => Manifold::So3 {
                metric: self.so3_metric,
            },
        }
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        (1..=self.n_components)
            .map(|k| self.lambda_base.powf(k as f64 / 3.0))
            .collect()
    }

    pub fn grid(&self) -> Vec<f64> {
        uniform_grid(0.0, 1.0, self.grid_size)
    }

    /// True mean and the first `n_components` eigenfunctions at `t`.
    pub fn truth(&self, t: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        match self.manifold {
            SimManifold::S2 => truth_s2(t, self.n_components),
            SimManifold::So3 => Ok(truth_so3(t, self.n_components, self.so3_metric)),
        }
    }

    /// `Σ_k λ_k φ_k(s) φ_k(t)ᵀ` on `grid`.
    pub fn true_covariance(&self, grid: &[f64]) -> Result<CovarianceSurface> {
        let d = self.geometry().ambient_dim();
        let lambda = self.eigenvalues();
        let phis: Vec<Vec<Vec<f64>>> = grid
            .iter()
            .map(|&t| self.truth(t).map(|(_, p)| p))
            .collect::<Result<_>>()?;
        Ok(CovarianceSurface::from_fn(grid, d, |a, b| {
            let mut m = vec![0.0; d * d];
            for (k, l) in lambda.iter().enumerate() {
                for i in 0..d {
                    for j in 0..d {
                        m[i * d + j] += l * phis[a][k][i] * phis[b][k][j];
                    }
                }
            }
            m
        }))
    }
}

/// S² truth: `μ(t) = Exp_p(ν(t))` with `p = (0,0,1)` and
/// `ν(t) = (2t/√2, 0.3π sin πt, 0)`; `φ_k(t) = 2^{-1/2} R_t (ζ_k(t/2), ζ_k((t+1)/2), 0)`
/// with `R_t` the rotation taking `p` to `μ(t)`.
pub fn truth_s2(t: f64, n_components: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let m = Manifold::sphere(2);
    let p = [0.0, 0.0, 1.0];
    let nu = [2.0 * t * FRAC_1_SQRT_2, 0.3 * PI * (PI * t).sin(), 0.0];
    let mu = m.exp(&p, &nu);
    let r = rotation_between(&p, &mu)?;
    let phis = (1..=n_components)
        .map(|k| {
            let v = DVector::from_vec(vec![
                FRAC_1_SQRT_2 * cosine_basis(k, t / 2.0),
                FRAC_1_SQRT_2 * cosine_basis(k, (t + 1.0) / 2.0),
                0.0,
            ]);
            (&r * v).as_slice().to_vec()
        })
        .collect();
    Ok((mu, phis))
}

/// SO(3) truth: `μ(t) = expm(ι(2t, 0.3π sin πt, 0))` and
/// `φ_k(t) = μ(t) · 3^{-1/2} ι(ζ_k(t/3), ζ_k((t+1)/3), ζ_k((t+2)/3))` in stored
/// coordinates for `metric`. These are orthonormal under the angle metric;
/// under the Frobenius metric each has squared norm 2.
pub fn truth_so3(t: f64, n_components: usize, metric: So3Metric) -> (Vec<f64>, Vec<Vec<f64>>) {
    let m = Manifold::So3 { metric };
    let mu = expm_so3(&vee(&iota([2.0 * t, 0.3 * PI * (PI * t).sin(), 0.0])));
    let c = 1.0 / 3f64.sqrt();
    let phis = (1..=n_components)
        .map(|k| {
            let omega = iota([
                c * cosine_basis(k, t / 3.0),
                c * cosine_basis(k, (t + 1.0) / 3.0),
                c * cosine_basis(k, (t + 2.0) / 3.0),
            ]);
            m.coords_from_ambient(&mat_to_vec(&(mu * omega)))
        })
        .collect();
    (mat_to_vec(&mu), phis)
}

/// Known scores and noiseless trajectories behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub grid: Vec<f64>,
    /// Per subject, `n_components` scores.
    pub scores: Vec<Vec<f64>>,
    /// Per subject, `X_i` on the grid, flat `G × D`.
    pub trajectories: Vec<Vec<f64>>,
}

/// Deterministic random stream for one replicate.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// Draw one dataset: `m_i ~ U{1..m_max}`, `T_ij ~ U[0,1]`, `ξ_ik ~ N(0, λ_k)`
/// and `Y_ij = Exp_{μ(T_ij)}(Σ_k ξ_ik φ_k(T_ij) + ε_ij)` with isotropic
/// `N(0, σ²)` noise on each tangent direction.
pub fn generate(config: &ScenarioConfig, rng: &mut impl Rng) -> Result<(LongitudinalDataset, SimTruth)> {
    config.validate()?;
    let manifold = config.geometry();
    let dim = manifold.ambient_dim();
    let lambda = config.eigenvalues();
    let noise = Normal::new(0.0, config.sigma2.sqrt())
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let std_normal = Normal::new(0.0, 1.0).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let grid = config.grid();
    let grid_truth: Vec<(Vec<f64>, Vec<Vec<f64>>)> =
        grid.iter().map(|&t| config.truth(t)).collect::<Result<_>>()?;

    let mut subjects = Vec::with_capacity(config.n);
    let mut scores = Vec::with_capacity(config.n);
    let mut trajectories = Vec::with_capacity(config.n);
    let mut tangent = vec![0.0; dim];
    for i in 0..config.n {
        let m = rng.random_range(1..=config.m_max);
        let times: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        let xi: Vec<f64> = lambda
            .iter()
            .map(|l| l.sqrt() * std_normal.sample(rng))
            .collect();
        let mut points = Vec::with_capacity(m * dim);
        for &t in &times {
            let (mu, phis) = config.truth(t)?;
            tangent.iter_mut().for_each(|x| *x = 0.0);
            for (x, phi) in xi.iter().zip(&phis) {
                tangent.iter_mut().zip(phi).for_each(|(v, p)| *v += x * p);
            }
            for e in manifold.tangent_basis(&mu) {
                let eta = noise.sample(rng);
                tangent.iter_mut().zip(&e).for_each(|(v, b)| *v += eta * b);
            }
            points.extend(manifold.exp(&mu, &tangent));
        }
        let mut traj = Vec::with_capacity(grid.len() * dim);
        for (mu, phis) in &grid_truth {
            tangent.iter_mut().for_each(|x| *x = 0.0);
            for (x, phi) in xi.iter().zip(phis) {
                tangent.iter_mut().zip(phi).for_each(|(v, p)| *v += x * p);
            }
            traj.extend(manifold.exp(mu, &tangent));
        }
        subjects.push(Subject {
            id: format!("{i}"),
            times,
            points,
        });
        scores.push(xi);
        trajectories.push(traj);
    }
    let data = LongitudinalDataset::new(manifold, subjects)?;
    Ok((
        data,
        SimTruth {
            grid,
            scores,
            trajectories,
        },
    ))
}

/// `∫ d²(X̂(t), X(t)) dt` by the trapezoid rule on `grid`.
pub fn integrated_squared_error(
    manifold: Manifold,
    fitted: &[f64],
    truth: &[f64],
    grid: &[f64],
) -> Result<f64> {
    let d = manifold.ambient_dim();
    if fitted.len() != grid.len() * d || truth.len() != grid.len() * d {
        return Err(Error::InvalidInput(format!(
            "trajectory lengths {} and {} do not match a grid of {} with D={d}",
            fitted.len(),
            truth.len(),
            grid.len()
        )));
    }
    let w = trapezoid_weights(grid);
    let mut total = 0.0;
    for (a, wa) in w.iter().enumerate() {
        let dist = manifold.dist(&fitted[a * d..(a + 1) * d], &truth[a * d..(a + 1) * d])?;
        total += wa * dist * dist;
    }
    Ok(total)
}

/// Mean over subjects of `(1/D) ∫ d²(X̂_i, X_i) dt` for one replicate.
pub fn replicate_mise(
    manifold: Manifold,
    fitted: &[Vec<f64>],
    truth: &[Vec<f64>],
    grid: &[f64],
    norm: RmiseNorm,
) -> Result<f64> {
    if fitted.len() != truth.len() || fitted.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} fitted trajectories for {} true ones",
            fitted.len(),
            truth.len()
        )));
    }
    let scale = match norm {
        RmiseNorm::Ambient => manifold.ambient_dim(),
        RmiseNorm::Intrinsic => manifold.intrinsic_dim(),
    } as f64;
    let mut total = 0.0;
    for (f, t) in fitted.iter().zip(truth) {
        total += integrated_squared_error(manifold, f, t, grid)?;
    }
    Ok(total / (scale * fitted.len() as f64))
}

/// RMISE over replicates and its Monte Carlo standard error (delta method).
pub fn rmise(replicate_mises: &[f64]) -> (f64, f64) {
    let b = replicate_mises.len();
    if b == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = replicate_mises.iter().sum::<f64>() / b as f64;
    let value = mean.sqrt();
    if b < 2 || value == 0.0 {
        return (value, 0.0);
    }
    let var = replicate_mises.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (b - 1) as f64;
    (value, (var / b as f64).sqrt() / (2.0 * value))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rpace,
    Extrinsic,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Rpace => "rpace",
            Method::Extrinsic => "extrinsic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub method: Method,
    pub manifold: SimManifold,
    pub scenario: u32,
    pub k: usize,
    pub rmise: f64,
    pub mc_se: f64,
    pub n_fail: usize,
}

/// Outcome of one replicate for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    /// Per `K = 1..k_max`, the replicate's mean integrated squared error.
    pub mise: Vec<f64>,
    pub sigma2: f64,
    pub mean_bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub rpace: std::result::Result<MethodOutcome, String>,
    pub extrinsic: std::result::Result<MethodOutcome, String>,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub config: ScenarioConfig,
    pub fit: FitConfig,
    pub k_max: usize,
    pub rows: Vec<StudyRow>,
    pub replicates: Vec<ReplicateOutcome>,
}

impl StudyReport {
    pub fn row(&self, method: Method, k: usize) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.method == method && r.k == k)
    }

    /// `σ̂²` of every successful intrinsic fit, by replicate.
    pub fn sigma2(&self) -> Vec<Option<f64>> {
        self.replicates
            .iter()
            .map(|r| r.rpace.as_ref().ok().map(|o| o.sigma2))
            .collect()
    }

    pub fn write_table(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "manifold", "scenario", "K", "rmise", "mc_se", "n_fail"])
            .map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.method.name().to_string(),
                r.manifold.name().to_string(),
                r.scenario.to_string(),
                r.k.to_string(),
                r.rmise.to_string(),
                r.mc_se.to_string(),
                r.n_fail.to_string(),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }

    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.config.seed,
            "scenario": self.config,
            "fit": self.fit,
            "k_max": self.k_max,
            "library_version": env!("CARGO_PKG_VERSION"),
        })
    }

    /// Write `table.csv` and `metadata.json` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let table = dir.join("table.csv");
        let f = std::fs::File::create(&table).map_err(|e| Error::io(&table, e))?;
        self.write_table(std::io::BufWriter::new(f))?;
        let meta = dir.join("metadata.json");
        let text = serde_json::to_string_pretty(&self.metadata())
            .map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&meta, text + "\n").map_err(|e| Error::io(&meta, e))?;
        Ok(())
    }
}

/// The fit configuration used by the study for a scenario.
pub fn study_fit_config(config: &ScenarioConfig, k_max: usize) -> FitConfig {
    FitConfig {
        scheme: WeightScheme::Obs,
        truncation: TruncationRule::Fixed(k_max),
        grid_size: config.grid_size,
        grid_range: Some((0.0, 1.0)),
        ..FitConfig::default()
    }
}

fn evaluate(
    fit: &FitResult,
    manifold: Manifold,
    truth: &SimTruth,
    k_max: usize,
    norm: RmiseNorm,
) -> Result<MethodOutcome> {
    let mut mise = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let recs = fit.reconstruct_with(k)?;
        let fitted: Vec<Vec<f64>> = recs.into_iter().map(|r| r.trajectory).collect();
        mise.push(replicate_mise(manifold, &fitted, &truth.trajectories, &truth.grid, norm)?);
    }
    Ok(MethodOutcome {
        mise,
        sigma2: fit.covariance.sigma2.value,
        mean_bandwidth: fit.mean_bandwidth,
    })
}

/// One replicate: generate, fit both methods, score `K = 1..k_max`.
pub fn run_replicate(
    config: &ScenarioConfig,
    fit_config: &FitConfig,
    k_max: usize,
    replicate: usize,
) -> ReplicateOutcome {
    let mut rng = replicate_rng(config.seed, replicate as u64);
    let manifold = config.geometry();
    let generated = generate(config, &mut rng).map_err(|e| e.to_string());
    let run = |method: Method| -> std::result::Result<MethodOutcome, String> {
        let (data, truth) = generated.as_ref().map_err(Clone::clone)?;
        let fit = match method {
            Method::Rpace => pace::fit(data, fit_config),
            Method::Extrinsic => pace::extrinsic_baseline(data, fit_config),
        }
        .map_err(|e| e.to_string())?;
        evaluate(&fit, manifold, truth, k_max, config.rmise_norm).map_err(|e| e.to_string())
    };
    ReplicateOutcome {
        replicate,
        rpace: run(Method::Rpace),
        extrinsic: run(Method::Extrinsic),
    }
}

/// Replicated comparison of both methods; replicates run in parallel on
/// independent random streams, so the report does not depend on scheduling.
/// More than 5% failed replicates for either method fails the study.
pub fn run_study(config: &ScenarioConfig, k_max: usize) -> Result<StudyReport> {
    run_study_with(config, &study_fit_config(config, k_max), k_max)
}

pub fn run_study_with(config: &ScenarioConfig, fit: &FitConfig, k_max: usize) -> Result<StudyReport> {
    config.validate()?;
    if k_max == 0 || config.replicates == 0 {
        return Err(Error::InvalidInput("k_max and replicates must be positive".into()));
    }
    let replicates: Vec<ReplicateOutcome> = (0..config.replicates)
        .into_par_iter()
        .map(|b| run_replicate(config, fit, k_max, b))
        .collect();
    let mut rows = Vec::new();
    for method in [Method::Rpace, Method::Extrinsic] {
        let outcomes: Vec<&std::result::Result<MethodOutcome, String>> = replicates
            .iter()
            .map(|r| match method {
                Method::Rpace => &r.rpace,
                Method::Extrinsic => &r.extrinsic,
            })
            .collect();
        let failures: Vec<(usize, String)> = outcomes
            .iter()
            .enumerate()
            .filter_map(|(b, o)| o.as_ref().err().map(|e| (b, e.clone())))
            .collect();
        if failures.len() as f64 > 0.05 * config.replicates as f64 {
            return Err(Error::Aggregate {
                what: format!("{} study replicates", method.name()),
                failures,
            });
        }
        for k in 1..=k_max {
            let mises: Vec<f64> = outcomes
                .iter()
                .filter_map(|o| o.as_ref().ok().map(|m| m.mise[k - 1]))
                .collect();
            let (value, se) = rmise(&mises);
            rows.push(StudyRow {
                method,
                manifold: config.manifold,
                scenario: config.scenario,
                k,
                rmise: value,
                mc_se: se,
                n_fail: failures.len(),
            });
        }
    }
    Ok(StudyReport {
        config: config.clone(),
        fit: fit.clone(),
        k_max,
        rows,
        replicates,
    })
}
