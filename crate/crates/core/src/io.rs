//! File formats: longitudinal CSV input, the compositional and preshape
//! transforms, and the fit output directory.
//!
//! Input and trajectory tables use the header `subject_id,time,c1,..,cD`.
//! Floating-point values are written in shortest round-trip form, so tables
//! read back bit-for-bit.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LongitudinalDataset, Subject};
use crate::error::{Error, Result};
use crate::geometry::{Manifold, So3Metric, POINT_TOL};
use crate::pace::{FitConfig, FitResult, Reconstruction, Reconstructor};
use crate::smoothing::WeightScheme;

/// Tolerance for near-manifold input when projection on ingest is enabled.
pub const PROJECT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldKind {
    /// `S^{D-1}` for `D` coordinate columns.
    Sphere,
    So3,
    Euclidean,
}

impl std::str::FromStr for ManifoldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sphere" | "s2" => Ok(ManifoldKind::Sphere),
            "so3" => Ok(ManifoldKind::So3),
            "euclidean" => Ok(ManifoldKind::Euclidean),
            other => Err(Error::InvalidInput(format!("unknown manifold kind {other:?}"))),
        }
    }
}

impl ManifoldKind {
    pub fn manifold(self, dim: usize, metric: So3Metric) -> Result<Manifold> {
        match self {
            ManifoldKind::Sphere if dim >= 2 => Ok(Manifold::sphere(dim - 1)),
            ManifoldKind::So3 if dim == 9 => Ok(Manifold::So3 { metric }),
            ManifoldKind::Euclidean if dim >= 1 => Ok(Manifold::euclidean(dim)),
            _ => Err(Error::InvalidInput(format!(
                "{dim} coordinate columns do not fit the {self:?} kind"
            ))),
        }
    }
}

/// One parsed input row.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub subject: String,
    pub time: f64,
    pub coords: Vec<f64>,
    /// 1-based line in the source file.
    pub line: usize,
}

/// Rows of a `subject_id,time,c1..cD` table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub dim: usize,
    pub rows: Vec<Row>,
}

fn parse_f64(field: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        line,
        detail: format!("{what} {field:?} is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            detail: format!("{what} {field:?} is not finite"),
        });
    }
    Ok(v)
}

pub fn read_table(reader: impl Read) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            detail: e.to_string(),
        })?
        .clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names.len() < 3 || names[0] != "subject_id" || names[1] != "time" {
        return Err(Error::Parse {
            line: 1,
            detail: format!("expected header subject_id,time,c1..cD, got {}", names.join(",")),
        });
    }
    for (k, name) in names[2..].iter().enumerate() {
        if *name != format!("c{}", k + 1) {
            return Err(Error::Parse {
                line: 1,
                detail: format!("coordinate column {} is named {name:?}, expected c{}", k + 3, k + 1),
            });
        }
    }
    let dim = names.len() - 2;
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            detail: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != dim + 2 {
            return Err(Error::Parse {
                line,
                detail: format!("expected {} fields, found {}", dim + 2, record.len()),
            });
        }
        let subject = record[0].trim().to_string();
        if subject.is_empty() {
            return Err(Error::Parse {
                line,
                detail: "empty subject_id".into(),
            });
        }
        let time = parse_f64(&record[1], line, "time")?;
        let coords = (0..dim)
            .map(|k| parse_f64(&record[k + 2], line, &format!("c{}", k + 1)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(Row {
            subject,
            time,
            coords,
            line,
        });
    }
    Ok(Table { dim, rows })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn coordinate_header(dim: usize) -> Vec<String> {
    ["subject_id".to_string(), "time".to_string()]
        .into_iter()
        .chain((1..=dim).map(|k| format!("c{k}")))
        .collect()
}

pub fn write_table(out: impl Write, table: &Table) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(coordinate_header(table.dim)).map_err(csv_err)?;
    for row in &table.rows {
        let mut rec = vec![row.subject.clone(), row.time.to_string()];
        rec.extend(row.coords.iter().map(f64::to_string));
        w.write_record(rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

/// Flatten a dataset back into table rows, subject by subject.
pub fn table_from_dataset(data: &LongitudinalDataset) -> Table {
    let dim = data.dim();
    let rows = data
        .subjects()
        .iter()
        .flat_map(|s| {
            s.times.iter().enumerate().map(move |(j, &time)| Row {
                subject: s.id.clone(),
                time,
                coords: s.points[j * dim..(j + 1) * dim].to_vec(),
                line: 0,
            })
        })
        .collect();
    Table { dim, rows }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestOptions {
    pub kind: ManifoldKind,
    pub so3_metric: So3Metric,
    /// Accept points within `PROJECT_TOL` of the manifold and project them.
    pub project: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            kind: ManifoldKind::Sphere,
            so3_metric: So3Metric::Frobenius,
            project: false,
        }
    }
}

/// Group table rows into a validated dataset. Duplicate `(subject, time)`
/// rows and off-manifold points are reported together, by line.
pub fn dataset_from_table(table: &Table, opts: &IngestOptions) -> Result<LongitudinalDataset> {
    let manifold = opts.kind.manifold(table.dim, opts.so3_metric)?;
    let mut offenders = Vec::new();
    let mut seen: HashSet<(&str, u64)> = HashSet::new();
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Subject> = HashMap::new();
    for row in &table.rows {
        if !seen.insert((row.subject.as_str(), row.time.to_bits())) {
            offenders.push(format!(
                "line {}: duplicate observation of subject {} at time {}",
                row.line, row.subject, row.time
            ));
            continue;
        }
        let point = if opts.project {
            manifold
                .check_point(&row.coords, PROJECT_TOL)
                .and_then(|_| manifold.project(&row.coords))
        } else {
            manifold.check_point(&row.coords, POINT_TOL).map(|_| row.coords.clone())
        };
        let point = match point {
            Ok(p) => p,
            Err(e) => {
                offenders.push(format!("line {}: {e}", row.line));
                continue;
            }
        };
        let entry = groups.entry(row.subject.as_str()).or_insert_with(|| {
            order.push(row.subject.as_str());
            Subject {
                id: row.subject.clone(),
                times: Vec::new(),
                points: Vec::new(),
            }
        });
        entry.times.push(row.time);
        entry.points.extend(point);
    }
    if !offenders.is_empty() {
        return Err(Error::Validation { offenders });
    }
    let subjects = order
        .into_iter()
        .map(|id| groups.remove(id).expect("grouped subject"))
        .collect();
    LongitudinalDataset::new(manifold, subjects)
}

pub fn ingest_reader(reader: impl Read, opts: &IngestOptions) -> Result<LongitudinalDataset> {
    dataset_from_table(&read_table(reader)?, opts)
}

pub fn ingest_csv(path: &Path, opts: &IngestOptions) -> Result<LongitudinalDataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(std::io::BufReader::new(f), opts)
}

/// Square root of a composition. Entries must be nonnegative; a row sum
/// within `1e-6` of one is renormalized first.
pub fn compositional_row(row: &[f64]) -> Result<Vec<f64>> {
    if let Some(x) = row.iter().find(|x| !(**x >= 0.0)) {
        return Err(Error::InvalidInput(format!("negative composition entry {x}")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("composition sums to {sum}, not 1")));
    }
    Ok(row.iter().map(|x| (x / sum).sqrt()).collect())
}

/// `Y / ‖Y‖` for a nonzero row.
pub fn preshape_row(row: &[f64]) -> Result<Vec<f64>> {
    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidInput(format!("cannot normalize a row of norm {n}")));
    }
    Ok(row.iter().map(|x| x / n).collect())
}

fn transform_rows(rows: &[Vec<f64>], f: fn(&[f64]) -> Result<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    let mut offenders = Vec::new();
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        match f(row) {
            Ok(r) => out.push(r),
            Err(e) => offenders.push(format!("row {i}: {e}")),
        }
    }
    if offenders.is_empty() {
        Ok(out)
    } else {
        Err(Error::Validation { offenders })
    }
}

/// Square-root transform of compositional rows onto the sphere.
pub fn transform_compositional(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    transform_rows(rows, compositional_row)
}

/// Size normalization of length measurements onto the sphere.
pub fn transform_preshape(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    transform_rows(rows, preshape_row)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Compositional,
    Preshape,
}

/// Apply a transform to the coordinates of every table row; offenders are
/// reported by line.
pub fn transform_table(table: &Table, kind: TransformKind) -> Result<Table> {
    let f = match kind {
        TransformKind::Compositional => compositional_row,
        TransformKind::Preshape => preshape_row,
    };
    let mut offenders = Vec::new();
    let mut rows = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        match f(&row.coords) {
            Ok(coords) => rows.push(Row {
                coords,
                ..row.clone()
            }),
            Err(e) => offenders.push(format!("line {}: {e}", row.line)),
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Validation { offenders });
    }
    Ok(Table {
        dim: table.dim,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcvEntry {
    pub bandwidth: f64,
    pub score: Option<f64>,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub library_version: String,
    pub manifold: Manifold,
    pub n_subjects: usize,
    pub n_observations: usize,
    pub scheme: WeightScheme,
    pub mean_bandwidth: f64,
    pub cov_bandwidth: f64,
    pub k: usize,
    pub eigenvalues: Vec<f64>,
    pub fve: Vec<f64>,
    pub sigma2: f64,
    pub sigma2_raw: f64,
    pub sigma2_floored: bool,
    pub grid: Vec<f64>,
    pub tangent_projected: bool,
    pub back_projected: bool,
    /// Number of (subject, grid node) pairs clamped to the injectivity radius.
    pub clamped_nodes: usize,
    pub gcv: Option<Vec<GcvEntry>>,
    pub config: FitConfig,
}

impl FitSummary {
    pub fn from_fit(fit: &FitResult) -> Self {
        let cov = &fit.covariance;
        Self {
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            manifold: fit.manifold,
            n_subjects: fit.residuals.subjects.len(),
            n_observations: fit.residuals.counts().iter().sum(),
            scheme: fit.config.scheme,
            mean_bandwidth: fit.mean_bandwidth,
            cov_bandwidth: fit.cov_bandwidth,
            k: fit.k,
            eigenvalues: cov.eigenvalues.clone(),
            fve: cov.fve(),
            sigma2: cov.sigma2.value,
            sigma2_raw: cov.sigma2.raw,
            sigma2_floored: cov.sigma2.floored,
            grid: cov.grid.clone(),
            tangent_projected: cov.tangent_projected,
            back_projected: fit.back_projected,
            clamped_nodes: fit.reconstructions.iter().map(|r| r.clamped.len()).sum(),
            gcv: fit.gcv.as_ref().map(|g| {
                g.candidates
                    .iter()
                    .map(|c| GcvEntry {
                        bandwidth: c.bandwidth,
                        score: c.score,
                    })
                    .collect()
            }),
            config: fit.config.clone(),
        }
    }
}

fn create(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

fn finish(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn fmt_all(xs: &[f64]) -> impl Iterator<Item = String> + '_ {
    xs.iter().map(f64::to_string)
}

/// Write `(subject, grid node, point)` rows.
pub fn write_trajectories(
    path: &Path,
    ids: &[&str],
    grid: &[f64],
    dim: usize,
    recs: &[Reconstruction],
) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(coordinate_header(dim)).map_err(csv_err)?;
    for (id, rec) in ids.iter().zip(recs) {
        for (a, t) in grid.iter().enumerate() {
            let mut r = vec![id.to_string(), t.to_string()];
            r.extend(fmt_all(&rec.trajectory[a * dim..(a + 1) * dim]));
            w.write_record(r).map_err(csv_err)?;
        }
    }
    finish(w, path)
}

/// Write a fit into `dir`: `summary.json`, `mean.csv`, `eigenvalues.csv`,
/// `eigenfunctions.csv` (the first `K`), `cov_diag.csv`, `scores.csv` and
/// `trajectories.csv`.
pub fn emit_fit(fit: &FitResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cov = &fit.covariance;
    let d = cov.dim();
    let grid = &cov.grid;
    let summary = FitSummary::from_fit(fit);
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;

    let path = dir.join("mean.csv");
    let mut w = create(&path)?;
    w.write_record(["t".to_string()].into_iter().chain((1..=d).map(|k| format!("c{k}"))))
        .map_err(csv_err)?;
    for (t, p) in grid.iter().zip(&fit.mean_grid) {
        w.write_record(std::iter::once(t.to_string()).chain(fmt_all(p))).map_err(csv_err)?;
    }
    finish(w, &path)?;

    let path = dir.join("eigenvalues.csv");
    let mut w = create(&path)?;
    w.write_record(["k", "lambda", "fve"]).map_err(csv_err)?;
    for (k, (l, f)) in cov.eigenvalues.iter().zip(cov.fve()).enumerate() {
        w.write_record([(k + 1).to_string(), l.to_string(), f.to_string()])
            .map_err(csv_err)?;
    }
    finish(w, &path)?;

    let path = dir.join("eigenfunctions.csv");
    let mut w = create(&path)?;
    w.write_record(
        ["k".to_string(), "t".to_string()]
            .into_iter()
            .chain((1..=d).map(|k| format!("c{k}"))),
    )
    .map_err(csv_err)?;
    for k in 0..fit.k.min(cov.n_components()) {
        for (a, t) in grid.iter().enumerate() {
            w.write_record(
                [(k + 1).to_string(), t.to_string()]
                    .into_iter()
                    .chain(fmt_all(cov.eigenfunction_node(k, a))),
            )
            .map_err(csv_err)?;
        }
    }
    finish(w, &path)?;

    let path = dir.join("cov_diag.csv");
    let mut w = create(&path)?;
    w.write_record(
        std::iter::once("t".to_string())
            .chain((1..=d).flat_map(|i| (1..=d).map(move |j| format!("g{i}_{j}")))),
    )
    .map_err(csv_err)?;
    for (t, m) in grid.iter().zip(cov.surface.diagonal()) {
        w.write_record(std::iter::once(t.to_string()).chain(fmt_all(m))).map_err(csv_err)?;
    }
    finish(w, &path)?;

    let ids = fit.subject_ids();
    let path = dir.join("scores.csv");
    let mut w = create(&path)?;
    w.write_record(
        std::iter::once("subject_id".to_string()).chain((1..=fit.k).map(|k| format!("xi{k}"))),
    )
    .map_err(csv_err)?;
    for (id, s) in ids.iter().zip(&fit.scores) {
        w.write_record(std::iter::once(id.to_string()).chain(fmt_all(s))).map_err(csv_err)?;
    }
    finish(w, &path)?;

    write_trajectories(&dir.join("trajectories.csv"), &ids, grid, d, &fit.reconstructions)
}

/// A fit read back from an output directory: enough to rebuild trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct EmittedFit {
    pub summary: FitSummary,
    pub mean: Vec<Vec<f64>>,
    pub eigenfunctions: Vec<Vec<f64>>,
    pub scores: Vec<(String, Vec<f64>)>,
}

fn read_numeric_csv(path: &Path, skip: usize) -> Result<Vec<(Vec<String>, Vec<f64>)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(std::io::BufReader::new(f));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            detail: format!("{}: {e}", path.display()),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let keys = rec.iter().take(skip).map(str::to_string).collect();
        let vals = rec
            .iter()
            .skip(skip)
            .map(|x| parse_f64(x, line, "value"))
            .collect::<Result<_>>()?;
        out.push((keys, vals));
    }
    Ok(out)
}

/// Read an output directory; `scores` overrides `scores.csv`.
pub fn load_fit(dir: &Path, scores: Option<&Path>) -> Result<EmittedFit> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let summary: FitSummary =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let d = summary.manifold.ambient_dim();
    let g = summary.grid.len();
    let mean: Vec<Vec<f64>> = read_numeric_csv(&dir.join("mean.csv"), 0)?
        .into_iter()
        .map(|(_, v)| v[1..].to_vec())
        .collect();
    if mean.len() != g || mean.iter().any(|p| p.len() != d) {
        return Err(Error::Format("mean.csv does not match the summary grid".into()));
    }
    let mut eigenfunctions: Vec<Vec<f64>> = Vec::new();
    for (_, v) in read_numeric_csv(&dir.join("eigenfunctions.csv"), 0)? {
        let k = v[0] as usize;
        if k == 0 || k > eigenfunctions.len() + 1 || v.len() != d + 2 {
            return Err(Error::Format("malformed eigenfunctions.csv".into()));
        }
        if k > eigenfunctions.len() {
            eigenfunctions.push(Vec::with_capacity(g * d));
        }
        eigenfunctions[k - 1].extend_from_slice(&v[2..]);
    }
    if eigenfunctions.iter().any(|f| f.len() != g * d) {
        return Err(Error::Format("eigenfunctions.csv does not match the summary grid".into()));
    }
    let scores_path = scores.map_or_else(|| dir.join("scores.csv"), Path::to_path_buf);
    let scores = read_numeric_csv(&scores_path, 1)?
        .into_iter()
        .map(|(k, v)| (k.into_iter().next().unwrap_or_default(), v))
        .collect();
    Ok(EmittedFit {
        summary,
        mean,
        eigenfunctions,
        scores,
    })
}

impl EmittedFit {
    pub fn reconstructor(&self) -> Reconstructor<'_> {
        let m = self.summary.manifold;
        Reconstructor {
            geometry: if self.summary.back_projected {
                Manifold::euclidean(m.ambient_dim())
            } else {
                m
            },
            eigenfunctions: &self.eigenfunctions,
            mean: &self.mean,
            tangent_projection: self.summary.tangent_projected,
            back_projection: self.summary.back_projected.then_some(m),
        }
    }

    pub fn reconstruct(&self) -> Result<Vec<Reconstruction>> {
        let r = self.reconstructor();
        self.scores.iter().map(|(_, s)| r.reconstruct(s)).collect()
    }

    /// Recompute trajectories from the loaded scores and write them to `path`.
    pub fn write_reconstruction(&self, path: &Path) -> Result<()> {
        let recs = self.reconstruct()?;
        let ids: Vec<&str> = self.scores.iter().map(|(id, _)| id.as_str()).collect();
        write_trajectories(path, &ids, &self.summary.grid, self.summary.manifold.ambient_dim(), &recs)
    }
}
