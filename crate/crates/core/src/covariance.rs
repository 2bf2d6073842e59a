//! Tangent-space covariance: log residuals around the mean curve, the
//! local-linear matrix scatterplot smoother, eigendecomposition of the
//! smoothed surface, the noise variance and truncation by FVE.

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::data::{trapezoid_weights, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::mean::MeanCurve;
use crate::smoothing::{self, kernel_h, WeightScheme};

/// One subject's tangent residuals `L̂_ij = Log_{μ̂(T_ij)} Y_ij`, flat `m × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectResiduals {
    pub id: String,
    pub times: Vec<f64>,
    pub vectors: Vec<f64>,
}

impl SubjectResiduals {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn vector(&self, j: usize, dim: usize) -> &[f64] {
        &self.vectors[j * dim..(j + 1) * dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogResiduals {
    pub dim: usize,
    pub intrinsic_dim: usize,
    pub subjects: Vec<SubjectResiduals>,
}

impl LogResiduals {
    pub fn counts(&self) -> Vec<usize> {
        self.subjects.iter().map(SubjectResiduals::len).collect()
    }
}

/// Log-map every observation at the mean curve evaluated at its time.
pub fn log_residuals(data: &LongitudinalDataset, curve: &MeanCurve) -> Result<LogResiduals> {
    let manifold = data.manifold();
    let dim = data.dim();
    let mut subjects = Vec::with_capacity(data.n_subjects());
    for (i, s) in data.subjects().iter().enumerate() {
        let mut vectors = vec![0.0; s.points.len()];
        for (j, &t) in s.times.iter().enumerate() {
            let mu = curve.eval(t)?;
            manifold
                .log_into(&mu, s.point(j, dim), &mut vectors[j * dim..(j + 1) * dim])
                .map_err(|e| match e {
                    Error::CutLocus(msg) => Error::CutLocus(format!(
                        "subject {} (index {i}), observation {j} at t={t}: {msg}",
                        s.id
                    )),
                    other => other,
                })?;
        }
        subjects.push(SubjectResiduals {
            id: s.id.clone(),
            times: s.times.clone(),
            vectors,
        });
    }
    Ok(LogResiduals {
        dim,
        intrinsic_dim: manifold.intrinsic_dim(),
        subjects,
    })
}

/// Matrix-valued raw covariances `Γ_ijl` indexed by subject and an
/// observation pair.
pub trait RawCovariances {
    fn dim(&self) -> usize;
    fn n_subjects(&self) -> usize;
    fn times(&self, i: usize) -> &[f64];
    /// Write the row-major `D × D` matrix `Γ_ijl` into `out`.
    fn raw_into(&self, i: usize, j: usize, l: usize, out: &mut [f64]);
}

impl RawCovariances for LogResiduals {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    fn times(&self, i: usize) -> &[f64] {
        &self.subjects[i].times
    }

    fn raw_into(&self, i: usize, j: usize, l: usize, out: &mut [f64]) {
        let d = self.dim;
        let a = self.subjects[i].vector(j, d);
        let b = self.subjects[i].vector(l, d);
        for (r, x) in a.iter().enumerate() {
            for (c, y) in b.iter().enumerate() {
                out[r * d + c] = x * y;
            }
        }
    }
}

/// Symmetric local-plane normal matrix with entries over `(1, x, y)`.
#[derive(Debug, Clone, Copy, Default)]
struct PlaneMoments {
    s00: f64,
    s01: f64,
    s02: f64,
    s11: f64,
    s12: f64,
    s22: f64,
}

impl PlaneMoments {
    /// `c = S⁻¹e₀`, so that the intercept of every entrywise fit is `cᵀR`.
    fn intercept_row(&self, s: f64, t: f64) -> Result<Vector3<f64>> {
        let m = Matrix3::new(
            self.s00, self.s01, self.s02, self.s01, self.s11, self.s12, self.s02, self.s12, self.s22,
        );
        let eig = SymmetricEigen::new(m);
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(max > 0.0) || !(min > 1e-10 * max) {
            return Err(Error::BandwidthTooSmall {
                location: format!("(s,t)=({s},{t})"),
                detail: format!(
                    "rank-deficient local-plane normal equations (eigenvalues {min:e} .. {max:e})"
                ),
            });
        }
        let mut c = Vector3::zeros();
        for k in 0..3 {
            let u = eig.eigenvectors.column(k);
            c += u * (u[0] / eig.eigenvalues[k]);
        }
        Ok(c)
    }
}

/// Local-linear estimate `Â₀(s, t)` from the off-diagonal raw covariances,
/// weighted by `v_i K_h(T_ij − s) K_h(T_il − t)`.
pub fn smooth_covariance_at<R: RawCovariances + ?Sized>(
    s: f64,
    t: f64,
    h: f64,
    raw: &R,
    v: &[f64],
) -> Result<Vec<f64>> {
    if v.len() != raw.n_subjects() {
        return Err(Error::InvalidInput(format!(
            "{} covariance weights for {} subjects",
            v.len(),
            raw.n_subjects()
        )));
    }
    let d2 = raw.dim() * raw.dim();
    let mut pm = PlaneMoments::default();
    let mut terms: Vec<(usize, usize, usize, f64, f64, f64)> = Vec::new();
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        let times = raw.times(i);
        for (j, &tj) in times.iter().enumerate() {
            let kj = kernel_h(tj - s, h);
            if kj == 0.0 {
                continue;
            }
            for (l, &tl) in times.iter().enumerate() {
                if l == j {
                    continue;
                }
                let kl = kernel_h(tl - t, h);
                if kl == 0.0 {
                    continue;
                }
                let w = vi * kj * kl;
                let x = (tj - s) / h;
                let y = (tl - t) / h;
                pm.s00 += w;
                pm.s01 += w * x;
                pm.s02 += w * y;
                pm.s11 += w * x * x;
                pm.s12 += w * x * y;
                pm.s22 += w * y * y;
                terms.push((i, j, l, w, x, y));
            }
        }
    }
    let c = pm.intercept_row(s, t)?;
    let mut out = vec![0.0; d2];
    let mut buf = vec![0.0; d2];
    for (i, j, l, w, x, y) in terms {
        raw.raw_into(i, j, l, &mut buf);
        let f = w * (c[0] + c[1] * x + c[2] * y);
        out.iter_mut().zip(&buf).for_each(|(o, g)| *o += f * g);
    }
    Ok(out)
}

/// A `G × G` grid of `D × D` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSurface {
    pub grid: Vec<f64>,
    pub dim: usize,
    values: Vec<f64>,
}

/// Bracketing grid indices and the interpolation fraction for `t`.
pub(crate) fn grid_bracket(grid: &[f64], t: f64) -> Result<(usize, usize, f64)> {
    let lo = grid[0];
    let hi = grid[grid.len() - 1];
    let slack = 1e-12 * (hi - lo).abs().max(1.0);
    if !(t >= lo - slack && t <= hi + slack) {
        return Err(Error::OutOfDomain { t, lo, hi });
    }
    if grid.len() == 1 {
        return Ok((0, 0, 0.0));
    }
    let t = t.clamp(lo, hi);
    let b = grid.partition_point(|&g| g < t).clamp(1, grid.len() - 1);
    let a = b - 1;
    Ok((a, b, (t - grid[a]) / (grid[b] - grid[a])))
}

impl CovarianceSurface {
    pub fn zeros(grid: &[f64], dim: usize) -> Self {
        let g = grid.len();
        Self {
            grid: grid.to_vec(),
            dim,
            values: vec![0.0; g * g * dim * dim],
        }
    }

    /// Build from a closure returning the row-major matrix at `(t_a, t_b)`.
    pub fn from_fn(grid: &[f64], dim: usize, mut f: impl FnMut(usize, usize) -> Vec<f64>) -> Self {
        let mut surf = Self::zeros(grid, dim);
        for a in 0..grid.len() {
            for b in 0..grid.len() {
                surf.get_mut(a, b).copy_from_slice(&f(a, b));
            }
        }
        surf
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn get(&self, a: usize, b: usize) -> &[f64] {
        let d2 = self.dim * self.dim;
        let k = (a * self.grid.len() + b) * d2;
        &self.values[k..k + d2]
    }

    pub fn get_mut(&mut self, a: usize, b: usize) -> &mut [f64] {
        let d2 = self.dim * self.dim;
        let k = (a * self.grid.len() + b) * d2;
        &mut self.values[k..k + d2]
    }

    /// Bilinear interpolation at an arbitrary `(s, t)` inside the grid.
    pub fn at(&self, s: f64, t: f64) -> Result<Vec<f64>> {
        let (a0, a1, fa) = grid_bracket(&self.grid, s)?;
        let (b0, b1, fb) = grid_bracket(&self.grid, t)?;
        let mut out = vec![0.0; self.dim * self.dim];
        for (a, wa) in [(a0, 1.0 - fa), (a1, fa)] {
            for (b, wb) in [(b0, 1.0 - fb), (b1, fb)] {
                let w = wa * wb;
                if w != 0.0 {
                    out.iter_mut().zip(self.get(a, b)).for_each(|(o, g)| *o += w * g);
                }
            }
        }
        Ok(out)
    }

    /// `Γ(s, t) ← (Γ(s, t) + Γ(t, s)ᵀ)/2`.
    pub fn symmetrize(&mut self) {
        let g = self.grid.len();
        let d = self.dim;
        for a in 0..g {
            for b in a..g {
                for i in 0..d {
                    for j in 0..d {
                        if a == b && j < i {
                            continue;
                        }
                        let x = self.get(a, b)[i * d + j];
                        let y = self.get(b, a)[j * d + i];
                        let m = 0.5 * (x + y);
                        self.get_mut(a, b)[i * d + j] = m;
                        self.get_mut(b, a)[j * d + i] = m;
                    }
                }
            }
        }
    }

    /// Largest `|Γ(s,t) − Γ(t,s)ᵀ|` over the grid.
    pub fn asymmetry(&self) -> f64 {
        let g = self.grid.len();
        let d = self.dim;
        let mut worst = 0.0f64;
        for a in 0..g {
            for b in 0..g {
                for i in 0..d {
                    for j in 0..d {
                        worst = worst.max((self.get(a, b)[i * d + j] - self.get(b, a)[j * d + i]).abs());
                    }
                }
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// `Γ(t_a, t_a)` for every grid node.
    pub fn diagonal(&self) -> Vec<&[f64]> {
        (0..self.grid.len()).map(|a| self.get(a, a)).collect()
    }

    /// Replace `Γ(t_a, t_b)` by `P_a Γ(t_a, t_b) P_b` with `P_a = B_a B_aᵀ` the
    /// orthogonal projector onto the span of the orthonormal basis `B_a`,
    /// then re-symmetrize.
    pub fn project(&mut self, bases: &[Vec<Vec<f64>>]) {
        let g = self.grid.len();
        let d = self.dim;
        let projectors: Vec<DMatrix<f64>> = bases
            .iter()
            .map(|basis| {
                let mut p = DMatrix::zeros(d, d);
                for e in basis {
                    let v = nalgebra::DVector::from_column_slice(e);
                    p += &v * v.transpose();
                }
                p
            })
            .collect();
        for a in 0..g {
            for b in 0..g {
                let m = DMatrix::from_row_slice(d, d, self.get(a, b));
                let pm = &projectors[a] * m * &projectors[b];
                let out = self.get_mut(a, b);
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j] = pm[(i, j)];
                    }
                }
            }
        }
        self.symmetrize();
    }
}

/// Per grid node and subject: kernel moments and kernel-weighted residual sums.
struct NodeSubject {
    subject: usize,
    s0: f64,
    s1: f64,
    s2: f64,
    a0: Vec<f64>,
    a1: Vec<f64>,
    /// `(observation, kernel, scaled offset)` for observations in the window.
    obs: Vec<(usize, f64, f64)>,
}

/// The smoothed covariance surface on `grid`, symmetrized.
///
/// Outer-product raw covariances let the sums over pairs `j ≠ l` factor into
/// products of per-subject sums minus the diagonal `j = l` terms, so each
/// grid pair costs `O(m D²)` per subject instead of `O(m² D²)`.
pub fn covariance_surface(
    res: &LogResiduals,
    h: f64,
    v: &[f64],
    grid: &[f64],
) -> Result<CovarianceSurface> {
    if v.len() != res.subjects.len() {
        return Err(Error::InvalidInput(format!(
            "{} covariance weights for {} subjects",
            v.len(),
            res.subjects.len()
        )));
    }
    if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput("grid must be nonempty and strictly increasing".into()));
    }
    let d = res.dim;
    let g = grid.len();
    let n = res.subjects.len();
    let mut nodes: Vec<Vec<NodeSubject>> = Vec::with_capacity(g);
    let mut slot = vec![usize::MAX; g * n];
    for (a, &s) in grid.iter().enumerate() {
        let mut list = Vec::new();
        for (i, sub) in res.subjects.iter().enumerate() {
            if v[i] == 0.0 {
                continue;
            }
            let mut ns = NodeSubject {
                subject: i,
                s0: 0.0,
                s1: 0.0,
                s2: 0.0,
                a0: vec![0.0; d],
                a1: vec![0.0; d],
                obs: Vec::new(),
            };
            for (j, &tj) in sub.times.iter().enumerate() {
                let k = kernel_h(tj - s, h);
                if k == 0.0 {
                    continue;
                }
                let x = (tj - s) / h;
                ns.s0 += k;
                ns.s1 += k * x;
                ns.s2 += k * x * x;
                for (r, l) in sub.vector(j, d).iter().enumerate() {
                    ns.a0[r] += k * l;
                    ns.a1[r] += k * x * l;
                }
                ns.obs.push((j, k, x));
            }
            if !ns.obs.is_empty() {
                slot[a * n + i] = list.len();
                list.push(ns);
            }
        }
        nodes.push(list);
    }

    let mut surf = CovarianceSurface::zeros(grid, d);
    let mut failures = Vec::new();
    for a in 0..g {
        for b in 0..g {
            let pairs: Vec<(&NodeSubject, &NodeSubject)> = nodes[a]
                .iter()
                .filter_map(|na| {
                    let k = slot[b * n + na.subject];
                    (k != usize::MAX).then(|| (na, &nodes[b][k]))
                })
                .collect();
            let tb = grid[b];
            let mut pm = PlaneMoments::default();
            for (na, nb) in &pairs {
                let vi = v[na.subject];
                let times = &res.subjects[na.subject].times;
                let (mut c00, mut c01, mut c02, mut c11, mut c12, mut c22) =
                    (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for &(j, ka, x) in &na.obs {
                    let kb = kernel_h(times[j] - tb, h);
                    if kb == 0.0 {
                        continue;
                    }
                    let y = (times[j] - tb) / h;
                    let w = ka * kb;
                    c00 += w;
                    c01 += w * x;
                    c02 += w * y;
                    c11 += w * x * x;
                    c12 += w * x * y;
                    c22 += w * y * y;
                }
                pm.s00 += vi * (na.s0 * nb.s0 - c00);
                pm.s01 += vi * (na.s1 * nb.s0 - c01);
                pm.s02 += vi * (na.s0 * nb.s1 - c02);
                pm.s11 += vi * (na.s2 * nb.s0 - c11);
                pm.s12 += vi * (na.s1 * nb.s1 - c12);
                pm.s22 += vi * (na.s0 * nb.s2 - c22);
            }
            let c = match pm.intercept_row(grid[a], tb) {
                Ok(c) => c,
                Err(e) => {
                    failures.push((a * g + b, e.to_string()));
                    continue;
                }
            };
            let out = surf.get_mut(a, b);
            let mut left = vec![0.0; d];
            for (na, nb) in &pairs {
                let vi = v[na.subject];
                let sub = &res.subjects[na.subject];
                left.iter_mut()
                    .zip(na.a0.iter().zip(&na.a1))
                    .for_each(|(o, (x0, x1))| *o = c[0] * x0 + c[1] * x1);
                for r in 0..d {
                    for q in 0..d {
                        out[r * d + q] +=
                            vi * (left[r] * nb.a0[q] + c[2] * na.a0[r] * nb.a1[q]);
                    }
                }
                for &(j, ka, x) in &na.obs {
                    let kb = kernel_h(sub.times[j] - tb, h);
                    if kb == 0.0 {
                        continue;
                    }
                    let y = (sub.times[j] - tb) / h;
                    let f = vi * ka * kb * (c[0] + c[1] * x + c[2] * y);
                    let l = sub.vector(j, d);
                    for r in 0..d {
                        let fr = f * l[r];
                        for q in 0..d {
                            out[r * d + q] -= fr * l[q];
                        }
                    }
                }
            }
        }
    }
    if !failures.is_empty() {
        return Err(Error::Aggregate {
            what: format!("covariance surface with h={h}"),
            failures,
        });
    }
    surf.symmetrize();
    Ok(surf)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    /// `G × D` values of the eigenfunction on the grid.
    pub function: Vec<f64>,
}

/// Eigenpairs of the integral operator with kernel `Γ̂` under quadrature
/// `weights`, in decreasing order. Pairs with `λ ≤ max(0, 1e-12·λ₁)` are
/// dropped and every eigenfunction has its largest-magnitude entry positive.
pub fn eigendecompose(surface: &CovarianceSurface, weights: &[f64]) -> Result<Vec<EigenPair>> {
    eigendecompose_in_basis(surface, weights, None)
}

/// As [`eigendecompose`], restricted to the span of an orthonormal basis at
/// each node. For a surface already projected onto those spans the nonzero
/// spectrum is unchanged and the matrix is smaller.
pub(crate) fn eigendecompose_in_basis(
    surface: &CovarianceSurface,
    weights: &[f64],
    bases: Option<&[Vec<Vec<f64>>]>,
) -> Result<Vec<EigenPair>> {
    let g = surface.len();
    let d = surface.dim;
    if weights.len() != g || weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::InvalidInput(
            "quadrature weights must be positive, one per grid node".into(),
        ));
    }
    let scale = surface.max_abs();
    let asym = surface.asymmetry();
    if asym > 1e-12 * scale {
        return Err(Error::Invariant(format!(
            "covariance surface is not symmetric (max |Γ(s,t) − Γ(t,s)ᵀ| = {asym:e})"
        )));
    }
    let identity: Vec<Vec<f64>> = (0..d)
        .map(|k| {
            let mut e = vec![0.0; d];
            e[k] = 1.0;
            e
        })
        .collect();
    let basis = |a: usize| -> &[Vec<f64>] {
        match bases {
            Some(b) => &b[a],
            None => &identity,
        }
    };
    let ranks: Vec<usize> = (0..g).map(|a| basis(a).len()).collect();
    let offsets: Vec<usize> = ranks
        .iter()
        .scan(0, |acc, r| {
            let o = *acc;
            *acc += r;
            Some(o)
        })
        .collect();
    let total: usize = ranks.iter().sum();
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut m = DMatrix::<f64>::zeros(total, total);
    let mut tmp = vec![0.0; d];
    for a in 0..g {
        for b in a..g {
            let gab = surface.get(a, b);
            let wab = sqrt_w[a] * sqrt_w[b];
            for (q, eb) in basis(b).iter().enumerate() {
                // tmp = Γ(a,b) e_b
                for r in 0..d {
                    tmp[r] = (0..d).map(|c| gab[r * d + c] * eb[c]).sum();
                }
                for (p, ea) in basis(a).iter().enumerate() {
                    let val = wab * ea.iter().zip(&tmp).map(|(x, y)| x * y).sum::<f64>();
                    m[(offsets[a] + p, offsets[b] + q)] = val;
                    m[(offsets[b] + q, offsets[a] + p)] = val;
                }
            }
        }
    }
    if total == 0 {
        return Ok(Vec::new());
    }
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let lambda1 = eig.eigenvalues[order[0]];
    let cutoff = (1e-12 * lambda1).max(0.0);
    let mut out = Vec::new();
    for &k in &order {
        let value = eig.eigenvalues[k];
        if !(value > cutoff) {
            break;
        }
        let u = eig.eigenvectors.column(k);
        let mut function = vec![0.0; g * d];
        for a in 0..g {
            for (p, e) in basis(a).iter().enumerate() {
                let coef = u[offsets[a] + p] / sqrt_w[a];
                for r in 0..d {
                    function[a * d + r] += coef * e[r];
                }
            }
        }
        let lead = function
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if lead < 0.0 {
            function.iter_mut().for_each(|x| *x = -*x);
        }
        out.push(EigenPair { value, function });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sigma2Estimate {
    /// The estimate used downstream, floored at `SIGMA2_FLOOR`.
    pub value: f64,
    /// The unfloored value of the formula.
    pub raw: f64,
    pub floored: bool,
}

pub const SIGMA2_FLOOR: f64 = 1e-10;

/// `σ̂² = Σ_i Σ_j (n d m_i)⁻¹ (‖L̂_ij‖² − Tr Γ̂(T_ij, T_ij))` with `d` the
/// intrinsic dimension and `Γ̂` interpolated bilinearly.
pub fn estimate_sigma2(res: &LogResiduals, surface: &CovarianceSurface) -> Result<Sigma2Estimate> {
    let d = res.dim;
    let n = res.subjects.len() as f64;
    let mut total = 0.0;
    for sub in &res.subjects {
        let mut acc = 0.0;
        for (j, &t) in sub.times.iter().enumerate() {
            let l = sub.vector(j, d);
            let gamma = surface.at(t, t)?;
            let trace: f64 = (0..d).map(|r| gamma[r * d + r]).sum();
            acc += l.iter().map(|x| x * x).sum::<f64>() - trace;
        }
        total += acc / (n * res.intrinsic_dim as f64 * sub.len() as f64);
    }
    Ok(if total > SIGMA2_FLOOR {
        Sigma2Estimate {
            value: total,
            raw: total,
            floored: false,
        }
    } else {
        Sigma2Estimate {
            value: SIGMA2_FLOOR,
            raw: total,
            floored: true,
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationRule {
    /// Smallest `K` whose fraction of variance explained reaches the threshold.
    Fve(f64),
    Fixed(usize),
}

impl Default for TruncationRule {
    fn default() -> Self {
        TruncationRule::Fve(0.95)
    }
}

/// Cumulative fractions of variance explained.
pub fn fve(eigenvalues: &[f64]) -> Vec<f64> {
    let total: f64 = eigenvalues.iter().sum();
    eigenvalues
        .iter()
        .scan(0.0, |acc, l| {
            *acc += l;
            Some(*acc / total)
        })
        .collect()
}

/// Number of components to keep; always at least one.
pub fn select_k(eigenvalues: &[f64], rule: TruncationRule) -> usize {
    match rule {
        TruncationRule::Fixed(k) => k.min(eigenvalues.len()).max(1),
        TruncationRule::Fve(gamma) => fve(eigenvalues)
            .iter()
            .position(|&f| f >= gamma)
            .map_or(eigenvalues.len(), |k| k + 1)
            .max(1),
    }
}

/// Smoothed covariance with its spectral decomposition and noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceModel {
    pub grid: Vec<f64>,
    pub quad_weights: Vec<f64>,
    pub surface: CovarianceSurface,
    pub eigenvalues: Vec<f64>,
    /// Each entry is a flat `G × D` eigenfunction.
    pub eigenfunctions: Vec<Vec<f64>>,
    pub sigma2: Sigma2Estimate,
    pub bandwidth: f64,
    pub scheme: WeightScheme,
    pub tangent_projected: bool,
}

impl CovarianceModel {
    pub fn dim(&self) -> usize {
        self.surface.dim
    }

    pub fn n_components(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn fve(&self) -> Vec<f64> {
        fve(&self.eigenvalues)
    }

    pub fn eigenfunction_node(&self, k: usize, a: usize) -> &[f64] {
        let d = self.dim();
        &self.eigenfunctions[k][a * d..(a + 1) * d]
    }

    /// `φ̂_k(t)` by linear interpolation between grid nodes.
    pub fn eigenfunction_at(&self, k: usize, t: f64) -> Result<Vec<f64>> {
        let (a, b, f) = grid_bracket(&self.grid, t)?;
        Ok(self
            .eigenfunction_node(k, a)
            .iter()
            .zip(self.eigenfunction_node(k, b))
            .map(|(x, y)| (1.0 - f) * x + f * y)
            .collect())
    }
}

/// Full covariance stage: weights, smoothed surface, optional projection onto
/// the tangent spaces along the mean curve, eigendecomposition and `σ̂²`.
pub fn estimate_covariance(
    res: &LogResiduals,
    curve: &MeanCurve,
    h: f64,
    scheme: WeightScheme,
    grid: &[f64],
    tangent_projection: bool,
) -> Result<CovarianceModel> {
    let v = smoothing::cov_weights(scheme, &res.counts(), h)?;
    let mut surface = covariance_surface(res, h, &v, grid)?;
    let manifold = curve.manifold;
    let project = tangent_projection && !manifold.is_flat();
    let bases = if project {
        let b = grid
            .iter()
            .map(|&t| Ok(manifold.tangent_basis(&curve.eval(t)?)))
            .collect::<Result<Vec<_>>>()?;
        surface.project(&b);
        Some(b)
    } else {
        None
    };
    let quad_weights = trapezoid_weights(grid);
    let pairs = eigendecompose_in_basis(&surface, &quad_weights, bases.as_deref())?;
    let sigma2 = estimate_sigma2(res, &surface)?;
    let (eigenvalues, eigenfunctions) = pairs.into_iter().map(|p| (p.value, p.function)).unzip();
    Ok(CovarianceModel {
        grid: grid.to_vec(),
        quad_weights,
        surface,
        eigenvalues,
        eigenfunctions,
        sigma2,
        bandwidth: h,
        scheme,
        tangent_projected: project,
    })
}
