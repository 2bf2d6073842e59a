//! Kernel smoothing machinery: the Epanechnikov kernel, subject weighting
//! schemes, local-linear weights and GCV bandwidth selection for the mean.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::mean::{self, OptimizerOptions};

/// `K(x) = 0.75 (1 − x²)` on `[−1, 1]`.
pub fn epanechnikov(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        0.75 * (1.0 - x * x)
    } else {
        0.0
    }
}

/// `K_h(x) = K(x/h)/h`.
pub fn kernel_h(x: f64, h: f64) -> f64 {
    epanechnikov(x / h) / h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    /// Equal weight per observation.
    #[default]
    Obs,
    /// Equal weight per subject.
    Subj,
    /// Data-driven blend of the two.
    Intm,
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "obs" => Ok(WeightScheme::Obs),
            "subj" => Ok(WeightScheme::Subj),
            "intm" => Ok(WeightScheme::Intm),
            other => Err(Error::InvalidInput(format!("unknown weight scheme {other:?}"))),
        }
    }
}

fn power_mean(counts: &[usize], p: i32) -> f64 {
    counts.iter().map(|&m| (m as f64).powi(p)).sum::<f64>() / counts.len() as f64
}

/// Blend factor of the INTM mean weights.
pub fn intm_mean_alpha(counts: &[usize], h: f64) -> f64 {
    let m_bar = power_mean(counts, 1);
    let m2 = power_mean(counts, 2);
    let m_h = 1.0 / power_mean(counts, -1);
    let c1 = 1.0 / (m_bar * h) + m2 / (m_bar * m_bar);
    let c2 = 1.0 / (m_h * h) + 1.0;
    c2 / (c1 + c2)
}

/// Blend factor of the INTM covariance weights.
pub fn intm_cov_alpha(counts: &[usize], h: f64) -> f64 {
    let m2 = power_mean(counts, 2);
    let m3 = power_mean(counts, 3);
    let m4 = power_mean(counts, 4);
    let m_h = 1.0 / power_mean(counts, -1);
    let m_q = 1.0 / power_mean(counts, -2);
    let c1 = 1.0 / (m2 * h * h) + m3 / (m2 * m2 * h) + m4 / (m2 * m2);
    let c2 = 1.0 / (m_q * h * h) + 1.0 / (m_h * h) + 1.0;
    c2 / (c1 + c2)
}

/// Per-subject weights `w_i` for the mean, normalized so `Σ m_i w_i = 1`.
pub fn mean_weights(scheme: WeightScheme, counts: &[usize], h: f64) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::InvalidInput("no subjects".into()));
    }
    if counts.contains(&0) {
        return Err(Error::InvalidInput("every subject needs at least one observation".into()));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {h}")));
    }
    let n = counts.len() as f64;
    let total: usize = counts.iter().sum();
    let obs = 1.0 / total as f64;
    let w = match scheme {
        WeightScheme::Obs => vec![obs; counts.len()],
        WeightScheme::Subj => counts.iter().map(|&m| 1.0 / (n * m as f64)).collect(),
        WeightScheme::Intm => {
            let alpha = intm_mean_alpha(counts, h);
            counts
                .iter()
                .map(|&m| alpha * obs + (1.0 - alpha) / (n * m as f64))
                .collect()
        }
    };
    Ok(w)
}

/// Per-subject weights `v_i` for the covariance, normalized so
/// `Σ m_i (m_i − 1) v_i = 1`. Subjects with a single observation get 0.
pub fn cov_weights(scheme: WeightScheme, counts: &[usize], h: f64) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::InvalidInput("no subjects".into()));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {h}")));
    }
    let pairs: Vec<f64> = counts
        .iter()
        .map(|&m| (m as f64) * (m.saturating_sub(1)) as f64)
        .collect();
    let total: f64 = pairs.iter().sum();
    let eligible = pairs.iter().filter(|&&p| p > 0.0).count();
    if eligible == 0 {
        return Err(Error::CovarianceUnidentifiable);
    }
    let n_eligible = eligible as f64;
    let subj = |p: f64| if p > 0.0 { 1.0 / (n_eligible * p) } else { 0.0 };
    let obs = |p: f64| if p > 0.0 { 1.0 / total } else { 0.0 };
    let v = match scheme {
        WeightScheme::Obs => pairs.iter().map(|&p| obs(p)).collect(),
        WeightScheme::Subj => pairs.iter().map(|&p| subj(p)).collect(),
        WeightScheme::Intm => {
            let alpha = intm_cov_alpha(counts, h);
            pairs
                .iter()
                .map(|&p| alpha * obs(p) + (1.0 - alpha) * subj(p))
                .collect()
        }
    };
    Ok(v)
}

/// All observations pooled and sorted by time, each tagged with its
/// subject's weight. Supports fast kernel-window queries.
#[derive(Debug, Clone)]
pub struct PooledDesign {
    dim: usize,
    times: Vec<f64>,
    weights: Vec<f64>,
    points: Vec<f64>,
    /// (subject, observation) of each pooled entry.
    origin: Vec<(usize, usize)>,
}

impl PooledDesign {
    pub fn new(data: &LongitudinalDataset, weights: &[f64]) -> Result<Self> {
        if weights.len() != data.n_subjects() {
            return Err(Error::InvalidInput(format!(
                "{} weights for {} subjects",
                weights.len(),
                data.n_subjects()
            )));
        }
        let dim = data.dim();
        let mut entries: Vec<(f64, usize, usize)> = data
            .subjects()
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.times.iter().enumerate().map(move |(j, &t)| (t, i, j)))
            .collect();
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut times = Vec::with_capacity(entries.len());
        let mut w = Vec::with_capacity(entries.len());
        let mut points = Vec::with_capacity(entries.len() * dim);
        let mut origin = Vec::with_capacity(entries.len());
        for (t, i, j) in entries {
            times.push(t);
            w.push(weights[i]);
            points.extend_from_slice(data.subjects()[i].point(j, dim));
            origin.push((i, j));
        }
        Ok(Self {
            dim,
            times,
            weights: w,
            points,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.dim..(k + 1) * self.dim]
    }

    pub fn origin(&self, k: usize) -> (usize, usize) {
        self.origin[k]
    }

    /// Indices of observations with `|T − t| < h`.
    pub fn window(&self, t: f64, h: f64) -> Range<usize> {
        let lo = self.times.partition_point(|&x| x <= t - h);
        let hi = self.times.partition_point(|&x| x < t + h);
        lo..hi.max(lo)
    }
}

/// Weighted kernel moments `û_k(t)` and `σ̂₀²(t) = û₀û₂ − û₁²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalMoments {
    pub u0: f64,
    pub u1: f64,
    pub u2: f64,
    pub sigma0sq: f64,
}

impl LocalMoments {
    pub fn is_degenerate(&self) -> bool {
        !(self.sigma0sq > 1e-12 * self.u0 * self.u2)
    }
}

pub fn local_moments(t: f64, h: f64, design: &PooledDesign) -> LocalMoments {
    let (mut u0, mut u1, mut u2) = (0.0, 0.0, 0.0);
    for k in design.window(t, h) {
        let x = design.times[k] - t;
        let kw = design.weights[k] * kernel_h(x, h);
        u0 += kw;
        u1 += kw * x;
        u2 += kw * x * x;
    }
    LocalMoments {
        u0,
        u1,
        u2,
        sigma0sq: u0 * u2 - u1 * u1,
    }
}

fn degenerate_error(t: f64, h: f64, m: &LocalMoments) -> Error {
    Error::BandwidthTooSmall {
        location: format!("t={t}"),
        detail: format!("h={h} leaves degenerate local moments (σ̂₀² = {:e})", m.sigma0sq),
    }
}

/// Local-linear weight `ω̂(T, t, h) = K_h(T − t){û₂ − û₁(T − t)}/σ̂₀²`.
pub fn local_weight(time: f64, t: f64, h: f64, moments: &LocalMoments) -> Result<f64> {
    if moments.is_degenerate() {
        return Err(degenerate_error(t, h, moments));
    }
    let x = time - t;
    Ok(kernel_h(x, h) * (moments.u2 - moments.u1 * x) / moments.sigma0sq)
}

/// The effective coefficients `w_i ω̂_ij(t)` of every observation in the
/// kernel window at `t`. They sum to one.
#[derive(Debug, Clone)]
pub struct LocalCoefficients {
    pub range: Range<usize>,
    pub coefs: Vec<f64>,
}

pub fn local_coefficients(t: f64, h: f64, design: &PooledDesign) -> Result<LocalCoefficients> {
    let moments = local_moments(t, h, design);
    if moments.is_degenerate() {
        return Err(degenerate_error(t, h, &moments));
    }
    let range = design.window(t, h);
    let coefs = range
        .clone()
        .map(|k| {
            let x = design.times[k] - t;
            design.weights[k] * kernel_h(x, h) * (moments.u2 - moments.u1 * x) / moments.sigma0sq
        })
        .collect();
    Ok(LocalCoefficients { range, coefs })
}

/// Ten log-spaced bandwidths from 1.5 × the largest gap between sorted pooled
/// times up to half the time range.
pub fn default_bandwidth_grid(data: &LongitudinalDataset) -> Vec<f64> {
    let mut times: Vec<f64> = data
        .subjects()
        .iter()
        .flat_map(|s| s.times.iter().copied())
        .collect();
    times.sort_by(f64::total_cmp);
    let range = times.last().copied().unwrap_or(0.0) - times.first().copied().unwrap_or(0.0);
    let max_gap = times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let lo = 1.5 * max_gap;
    let hi = 0.5 * range;
    if !(lo > 0.0) || lo >= hi {
        return vec![hi.max(lo)];
    }
    let n = 10;
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone)]
pub struct GcvCandidate {
    pub bandwidth: f64,
    /// `None` when the bandwidth was inadmissible.
    pub score: Option<f64>,
    /// Fitted mean at every observation, subject-major, `N × D`.
    pub fitted: Option<Vec<f64>>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GcvResult {
    pub bandwidth: f64,
    pub candidates: Vec<GcvCandidate>,
}

/// `GCV(h) = Σ d²(μ̂(T_ij), Y_ij) / (1 − K_h(0)/N)²` from a fitted mean given
/// subject-major at every observation.
pub fn gcv_score(data: &LongitudinalDataset, fitted: &[f64], h: f64) -> f64 {
    let manifold = data.manifold();
    let dim = data.dim();
    let n_total = data.total_observations() as f64;
    let mut rss = 0.0;
    let mut k = 0;
    for s in data.subjects() {
        for j in 0..s.len() {
            let d = manifold.dist_unchecked(&fitted[k * dim..(k + 1) * dim], s.point(j, dim));
            rss += d * d;
            k += 1;
        }
    }
    let denom = 1.0 - kernel_h(0.0, h) / n_total;
    rss / (denom * denom)
}

/// Fitted mean at every observation time for bandwidth `h`, subject-major.
/// Fits run in time order, each warm-started from the previous solution.
pub fn fit_at_observations(
    data: &LongitudinalDataset,
    scheme: WeightScheme,
    h: f64,
    opts: &OptimizerOptions,
) -> Result<Vec<f64>> {
    let manifold = data.manifold();
    let dim = data.dim();
    let weights = mean_weights(scheme, &data.counts(), h)?;
    let design = PooledDesign::new(data, &weights)?;
    let offsets: Vec<usize> = data
        .subjects()
        .iter()
        .scan(0, |acc, s| {
            let o = *acc;
            *acc += s.len();
            Some(o)
        })
        .collect();
    let mut fitted = vec![0.0; design.len() * dim];
    let mut prev: Option<(f64, Vec<f64>)> = None;
    for k in 0..design.len() {
        let t = design.times[k];
        let point = match &prev {
            Some((pt, p)) if *pt == t => p.clone(),
            _ => {
                let init = prev.as_ref().map(|(_, p)| p.as_slice());
                mean::estimate_mean_at(manifold, t, h, &design, init, opts)?.point
            }
        };
        let (i, j) = design.origin[k];
        let row = offsets[i] + j;
        fitted[row * dim..(row + 1) * dim].copy_from_slice(&point);
        prev = Some((t, point));
    }
    Ok(fitted)
}

fn numerically_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()) + 1e-20
}

/// Choose the mean bandwidth minimizing GCV over `candidates`; ties go to the
/// larger bandwidth. A candidate is admissible when its local moments are
/// non-degenerate on the whole working grid and every observation-time fit
/// converges.
pub fn gcv_bandwidth(
    data: &LongitudinalDataset,
    scheme: WeightScheme,
    candidates: &[f64],
    grid: &[f64],
    opts: &OptimizerOptions,
) -> Result<GcvResult> {
    if candidates.is_empty() {
        return Err(Error::BandwidthSelectionFailed("no candidate bandwidths".into()));
    }
    let mut out = Vec::with_capacity(candidates.len());
    for &h in candidates {
        let evaluated = (|| -> Result<(f64, Vec<f64>)> {
            let weights = mean_weights(scheme, &data.counts(), h)?;
            let design = PooledDesign::new(data, &weights)?;
            for &t in grid {
                let m = local_moments(t, h, &design);
                if m.is_degenerate() {
                    return Err(degenerate_error(t, h, &m));
                }
            }
            let fitted = fit_at_observations(data, scheme, h, opts)?;
            Ok((gcv_score(data, &fitted, h), fitted))
        })();
        out.push(match evaluated {
            Ok((score, fitted)) => GcvCandidate {
                bandwidth: h,
                score: Some(score),
                fitted: Some(fitted),
                failure: None,
            },
            Err(e) => GcvCandidate {
                bandwidth: h,
                score: None,
                fitted: None,
                failure: Some(e.to_string()),
            },
        });
    }
    let mut best: Option<(f64, f64)> = None;
    for c in &out {
        let Some(score) = c.score else { continue };
        best = match best {
            None => Some((c.bandwidth, score)),
            Some((bh, bs)) => {
                if numerically_equal(score, bs) {
                    Some((bh.max(c.bandwidth), bs.min(score)))
                } else if score < bs {
                    Some((c.bandwidth, score))
                } else {
                    Some((bh, bs))
                }
            }
        };
    }
    match best {
        Some((bandwidth, _)) => Ok(GcvResult {
            bandwidth,
            candidates: out,
        }),
        None => Err(Error::BandwidthSelectionFailed(format!(
            "all {} candidates are inadmissible; first failure: {}",
            out.len(),
            out[0].failure.as_deref().unwrap_or("")
        ))),
    }
}
