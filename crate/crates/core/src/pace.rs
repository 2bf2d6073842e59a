//! Score recovery by conditional expectation and trajectory reconstruction,
//! plus the end-to-end fitting pipeline.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{
    self, CovarianceModel, CovarianceSurface, LogResiduals, SubjectResiduals,
    TruncationRule,
};
use crate::data::{uniform_grid, LongitudinalDataset};
use crate::error::{Error, Result, StageExt};
use crate::geometry::Manifold;
use crate::mean::{self, MeanCurve, OptimizerOptions};
use crate::smoothing::{self, GcvResult, WeightScheme};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub scheme: WeightScheme,
    pub truncation: TruncationRule,
    /// Mean bandwidth; chosen by GCV when absent.
    pub mean_bandwidth: Option<f64>,
    /// Covariance bandwidth; twice the mean bandwidth when absent.
    pub cov_bandwidth: Option<f64>,
    /// GCV candidates; a log-spaced default when absent.
    pub bandwidth_candidates: Option<Vec<f64>>,
    pub grid_size: usize,
    /// Working grid range; the observed time range when absent.
    pub grid_range: Option<(f64, f64)>,
    /// Project the covariance and reconstructions onto the tangent spaces
    /// along the mean curve.
    pub tangent_projection: bool,
    pub optimizer: OptimizerOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            scheme: WeightScheme::Obs,
            truncation: TruncationRule::default(),
            mean_bandwidth: None,
            cov_bandwidth: None,
            bandwidth_candidates: None,
            grid_size: 51,
            grid_range: None,
            tangent_projection: true,
            optimizer: OptimizerOptions::default(),
        }
    }
}

/// Precomputed pieces of the conditional-expectation predictor.
///
/// The covariance of a subject's stacked residuals is assembled from the
/// eigen-expansion `Σ_k λ_k φ_k(s) φ_k(t)ᵀ` over every retained eigenpair, so
/// it is positive semidefinite before the nugget `σ̂² I` is added. With
/// linearly interpolated eigenfunctions this is exactly bilinear
/// interpolation of the expansion on the grid, which is what we store.
#[derive(Debug, Clone)]
pub struct Blup<'a> {
    model: &'a CovarianceModel,
    expansion: CovarianceSurface,
}

impl<'a> Blup<'a> {
    pub fn new(model: &'a CovarianceModel) -> Self {
        let g = model.grid.len();
        let d = model.dim();
        let c = model.n_components();
        let phi = DMatrix::from_fn(g * d, c, |r, k| model.eigenfunctions[k][r]);
        let mut scaled = phi.clone();
        for k in 0..c {
            scaled.column_mut(k).scale_mut(model.eigenvalues[k]);
        }
        let full = &scaled * phi.transpose();
        let expansion = CovarianceSurface::from_fn(&model.grid, d, |a, b| {
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    m[i * d + j] = full[(a * d + i, b * d + j)];
                }
            }
            m
        });
        Self { model, expansion }
    }

    /// The stacked covariance `Σ̂_{L_i}` for observation times `times`.
    pub fn stacked_covariance(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.model.dim();
        let m = times.len();
        let mut sigma = DMatrix::zeros(m * d, m * d);
        for j in 0..m {
            for l in j..m {
                let block = self.expansion.at(times[j], times[l])?;
                for r in 0..d {
                    for q in 0..d {
                        sigma[(j * d + r, l * d + q)] = block[r * d + q];
                        sigma[(l * d + q, j * d + r)] = block[r * d + q];
                    }
                }
            }
        }
        for k in 0..m * d {
            sigma[(k, k)] += self.model.sigma2.value;
        }
        Ok(sigma)
    }

    /// `ξ̂_ik = λ̂_k φ̂_ikᵀ Σ̂_{L_i}⁻¹ L̂_i` for `k < K`; components beyond the
    /// retained eigenpairs get score zero.
    pub fn scores(&self, res: &SubjectResiduals, k: usize) -> Result<Vec<f64>> {
        let d = self.model.dim();
        if res.vectors.len() != res.times.len() * d {
            return Err(Error::InvalidInput(format!(
                "subject {} residuals do not have dimension {d}",
                res.id
            )));
        }
        let sigma = self.stacked_covariance(&res.times)?;
        let n = sigma.nrows();
        let max_diag = (0..n).map(|i| sigma[(i, i)]).fold(0.0f64, f64::max);
        let conditioning = |condition: f64| Error::Conditioning {
            subject: res.id.clone(),
            condition,
        };
        let chol = Cholesky::new(sigma)
            .ok_or_else(|| conditioning(max_diag / self.model.sigma2.value))?;
        let z = chol.solve(&DVector::from_column_slice(&res.vectors));
        if !z.iter().all(|x| x.is_finite()) {
            let l = chol.l();
            let (lo, hi) = (0..n).fold((f64::INFINITY, 0.0f64), |(lo, hi), i| {
                (lo.min(l[(i, i)]), hi.max(l[(i, i)]))
            });
            return Err(conditioning((hi / lo).powi(2)));
        }
        let available = self.model.n_components().min(k);
        let mut out = vec![0.0; k];
        for (c, score) in out.iter_mut().enumerate().take(available) {
            let mut acc = 0.0;
            for (j, &t) in res.times.iter().enumerate() {
                let phi = self.model.eigenfunction_at(c, t)?;
                acc += phi.iter().zip(&z.as_slice()[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
            }
            *score = self.model.eigenvalues[c] * acc;
        }
        Ok(out)
    }
}

/// Scores of one subject under `model`, truncated at `k`.
pub fn blup_scores(res: &SubjectResiduals, model: &CovarianceModel, k: usize) -> Result<Vec<f64>> {
    Blup::new(model).scores(res, k)
}

/// A reconstructed trajectory on the model grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// `L̂_iK` on the grid, flat `G × D`.
    pub log_trajectory: Vec<f64>,
    /// `X̂_iK` on the grid, flat `G × D`.
    pub trajectory: Vec<f64>,
    /// Grid nodes whose tangent vector was shortened to stay inside the
    /// injectivity radius.
    pub clamped: Vec<usize>,
}

/// Mean curve at each node of `grid`.
pub fn mean_on_grid(curve: &MeanCurve, grid: &[f64]) -> Result<Vec<Vec<f64>>> {
    grid.iter().map(|&t| curve.eval(t)).collect()
}

/// The pieces needed to turn scores into trajectories.
#[derive(Debug, Clone, Copy)]
pub struct Reconstructor<'a> {
    /// Geometry in which the expansion lives (Euclidean for the extrinsic baseline).
    pub geometry: Manifold,
    /// Flat `G × D` eigenfunctions.
    pub eigenfunctions: &'a [Vec<f64>],
    /// Mean at each grid node.
    pub mean: &'a [Vec<f64>],
    pub tangent_projection: bool,
    /// Project every reconstructed value onto this manifold afterwards.
    pub back_projection: Option<Manifold>,
}

impl Reconstructor<'_> {
    /// `X̂_iK(t) = Exp_{μ̂(t)}(Σ_{k≤K} ξ̂_ik φ̂_k(t))` at every grid node.
    pub fn reconstruct(&self, scores: &[f64]) -> Result<Reconstruction> {
        let manifold = self.geometry;
        let d = manifold.ambient_dim();
        let g = self.mean.len();
        if let Some(bad) = self.eigenfunctions.iter().find(|f| f.len() != g * d) {
            return Err(Error::InvalidInput(format!(
                "eigenfunction has {} values, expected {g} × {d}",
                bad.len()
            )));
        }
        let radius = manifold.injectivity_radius();
        let mut log_trajectory = vec![0.0; g * d];
        let mut trajectory = vec![0.0; g * d];
        let mut clamped = Vec::new();
        let mut raw = vec![0.0; d];
        for a in 0..g {
            raw.iter_mut().for_each(|x| *x = 0.0);
            for (xi, phi) in scores.iter().zip(self.eigenfunctions) {
                raw.iter_mut()
                    .zip(&phi[a * d..(a + 1) * d])
                    .for_each(|(r, p)| *r += xi * p);
            }
            let l = &mut log_trajectory[a * d..(a + 1) * d];
            if self.tangent_projection {
                manifold.project_tangent_into(&self.mean[a], &raw, l);
            } else {
                l.copy_from_slice(&raw);
            }
            let norm = l.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > radius - 1e-6 {
                let s = (radius - 1e-6) / norm;
                l.iter_mut().for_each(|x| *x *= s);
                clamped.push(a);
            }
            let node = &mut trajectory[a * d..(a + 1) * d];
            manifold.exp_into(&self.mean[a], l, node);
            if let Some(target) = self.back_projection {
                let p = target.project(node)?;
                node.copy_from_slice(&p);
            }
        }
        Ok(Reconstruction {
            log_trajectory,
            trajectory,
            clamped,
        })
    }
}

/// Reconstruction under `model` in `manifold` with `mu` the mean at the
/// model's grid nodes.
pub fn reconstruct(
    scores: &[f64],
    model: &CovarianceModel,
    manifold: Manifold,
    mu: &[Vec<f64>],
) -> Result<Reconstruction> {
    if mu.len() != model.grid.len() {
        return Err(Error::InvalidInput(format!(
            "{} mean points for a grid of {}",
            mu.len(),
            model.grid.len()
        )));
    }
    Reconstructor {
        geometry: manifold,
        eigenfunctions: &model.eigenfunctions,
        mean: mu,
        tangent_projection: model.tangent_projected,
        back_projection: None,
    }
    .reconstruct(scores)
}

/// Everything produced by one fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    /// Geometry of the input data (the back-projection target for the
    /// extrinsic baseline).
    pub manifold: Manifold,
    pub config: FitConfig,
    pub mean: MeanCurve,
    /// The mean curve at the working grid nodes.
    pub mean_grid: Vec<Vec<f64>>,
    pub covariance: CovarianceModel,
    pub residuals: LogResiduals,
    pub gcv: Option<GcvResult>,
    pub mean_bandwidth: f64,
    pub cov_bandwidth: f64,
    pub k: usize,
    /// Per subject, `K` scores.
    pub scores: Vec<Vec<f64>>,
    pub reconstructions: Vec<Reconstruction>,
    /// Reconstructions are projected onto `manifold` after the exponential map.
    pub back_projected: bool,
}

impl FitResult {
    pub fn subject_ids(&self) -> Vec<&str> {
        self.residuals.subjects.iter().map(|s| s.id.as_str()).collect()
    }

    /// Scores for every subject truncated at `k`.
    pub fn scores_with(&self, k: usize) -> Result<Vec<Vec<f64>>> {
        let blup = Blup::new(&self.covariance);
        self.residuals.subjects.iter().map(|s| blup.scores(s, k)).collect()
    }

    pub fn reconstructor(&self) -> Reconstructor<'_> {
        Reconstructor {
            geometry: if self.back_projected {
                Manifold::euclidean(self.manifold.ambient_dim())
            } else {
                self.manifold
            },
            eigenfunctions: &self.covariance.eigenfunctions,
            mean: &self.mean_grid,
            tangent_projection: self.covariance.tangent_projected,
            back_projection: self.back_projected.then_some(self.manifold),
        }
    }

    /// Trajectories from given scores, back-projected when this fit is extrinsic.
    pub fn reconstruct_scores(&self, scores: &[f64]) -> Result<Reconstruction> {
        self.reconstructor().reconstruct(scores)
    }

    /// Reconstructions of every subject at truncation `k`.
    pub fn reconstruct_with(&self, k: usize) -> Result<Vec<Reconstruction>> {
        self.scores_with(k)?
            .iter()
            .map(|s| self.reconstruct_scores(s))
            .collect()
    }
}

/// The working grid for `data` under `config`.
pub fn working_grid(data: &LongitudinalDataset, config: &FitConfig) -> Result<Vec<f64>> {
    let (lo, hi) = config.grid_range.unwrap_or_else(|| data.time_range());
    if !(hi > lo) || config.grid_size < 2 {
        return Err(Error::InvalidInput(format!(
            "working grid needs lo < hi and at least 2 points (got [{lo}, {hi}], {} points)",
            config.grid_size
        )));
    }
    Ok(uniform_grid(lo, hi, config.grid_size))
}

/// Full pipeline: mean bandwidth, mean curve, residuals, covariance,
/// truncation, scores and reconstructions.
pub fn fit(data: &LongitudinalDataset, config: &FitConfig) -> Result<FitResult> {
    let manifold = data.manifold();
    let grid = working_grid(data, config).stage("working grid")?;
    let (h_mu, gcv) = match config.mean_bandwidth {
        Some(h) => (h, None),
        None => {
            let candidates = config
                .bandwidth_candidates
                .clone()
                .unwrap_or_else(|| smoothing::default_bandwidth_grid(data));
            let mut res =
                smoothing::gcv_bandwidth(data, config.scheme, &candidates, &grid, &config.optimizer)
                    .stage("mean bandwidth")?;
            res.candidates.iter_mut().for_each(|c| c.fitted = None);
            (res.bandwidth, Some(res))
        }
    };
    let curve = mean::estimate_mean_curve(data, h_mu, config.scheme, &grid, &config.optimizer)
        .stage("mean curve")?;
    let h_gamma = config.cov_bandwidth.unwrap_or(2.0 * h_mu);
    let residuals = covariance::log_residuals(data, &curve).stage("log residuals")?;
    let model = covariance::estimate_covariance(
        &residuals,
        &curve,
        h_gamma,
        config.scheme,
        &grid,
        config.tangent_projection,
    )
    .stage("covariance")?;
    let k = covariance::select_k(&model.eigenvalues, config.truncation);
    let mean_grid = mean_on_grid(&curve, &grid).stage("mean curve")?;
    let mut result = FitResult {
        manifold,
        config: config.clone(),
        mean: curve,
        mean_grid,
        covariance: model,
        residuals,
        gcv,
        mean_bandwidth: h_mu,
        cov_bandwidth: h_gamma,
        k,
        scores: Vec::new(),
        reconstructions: Vec::new(),
        back_projected: false,
    };
    result.scores = result.scores_with(k).stage("scores")?;
    result.reconstructions = result
        .scores
        .iter()
        .map(|s| result.reconstruct_scores(s))
        .collect::<Result<_>>()
        .stage("reconstruction")?;
    Ok(result)
}

/// Multivariate FPCA on the ambient coordinates, ignoring curvature, with
/// every reconstructed value projected back onto the data manifold.
pub fn extrinsic_baseline(data: &LongitudinalDataset, config: &FitConfig) -> Result<FitResult> {
    let manifold = data.manifold();
    let flat = data.reinterpret(Manifold::euclidean(manifold.ambient_dim()))?;
    let mut result = fit(&flat, config)?;
    result.manifold = manifold;
    result.back_projected = true;
    result.reconstructions = result
        .scores
        .iter()
        .map(|s| result.reconstruct_scores(s))
        .collect::<Result<_>>()
        .stage("back-projection")?;
    Ok(result)
}
