pub mod data;
pub mod error;
pub mod geometry;
pub mod mean;
pub mod smoothing;
pub mod covariance;
pub mod pace;
pub mod simgen;
pub mod io;
pub mod cli;

pub use error::{Error, Result};
pub use geometry::{Manifold, So3Metric};
pub use data::{LongitudinalDataset, Subject};
pub use pace::{extrinsic_baseline, fit, FitConfig, FitResult};
