use std::path::PathBuf;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The pair lies in (or numerically at) the cut locus of the base point.
    #[error("cut locus: {0}")]
    CutLocus(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("bandwidth too small at {location}: {detail}")]
    BandwidthTooSmall { location: String, detail: String },

    #[error("covariance is not identifiable: no subject has two or more observations")]
    CovarianceUnidentifiable,

    #[error("bandwidth selection failed: {0}")]
    BandwidthSelectionFailed(String),

    #[error("optimization failed at t={t} after {iterations} iterations (gradient norm {grad_norm:e})")]
    OptimizationFailure {
        t: f64,
        iterations: usize,
        grad_norm: f64,
        last: Vec<f64>,
    },

    #[error("t={t} is outside the domain [{lo}, {hi}]")]
    OutOfDomain { t: f64, lo: f64, hi: f64 },

    #[error("ill-conditioned system for subject {subject} (condition estimate {condition:e})")]
    Conditioning { subject: String, condition: f64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Per-item failures gathered from a batch (grid points, grid pairs, replicates).
    #[error("{what}: {} failure(s), first: {}", .failures.len(), .failures.first().map(|f| f.1.as_str()).unwrap_or(""))]
    Aggregate {
        what: String,
        failures: Vec<(usize, String)>,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("validation failed: {}", .offenders.join("; "))]
    Validation { offenders: Vec<String> },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Attach a pipeline stage label to an error.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
