//! Command-line front end for the `rpace` binary.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::covariance::TruncationRule;
use crate::error::{Error, Result, StageExt};
use crate::geometry::So3Metric;
use crate::io::{
    emit_fit, ingest_csv, load_fit, read_table, table_from_dataset, transform_table, write_table,
    IngestOptions, ManifoldKind, TransformKind,
};
use crate::pace::{extrinsic_baseline, fit, FitConfig};
use crate::simgen::{generate, replicate_rng, run_study, RmiseNorm, ScenarioConfig, SimManifold};
use crate::smoothing::WeightScheme;

#[derive(Debug, Parser)]
#[command(name = "rpace", version, about = "Riemannian functional PCA for sparse longitudinal data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit mean, covariance, scores and trajectories to a CSV of observations.
    Fit(FitArgs),
    /// Run a simulation study and write the RMISE table.
    Simulate(SimulateArgs),
    /// Map compositional or length data onto the sphere.
    Transform(TransformArgs),
    /// Rebuild trajectories from a fit directory and a score table.
    Reconstruct(ReconstructArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Sphere,
    So3,
    Euclidean,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Frobenius,
    Angle,
}

impl From<MetricArg> for So3Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Frobenius => So3Metric::Frobenius,
            MetricArg::Angle => So3Metric::Angle,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SchemeArg {
    Obs,
    Subj,
    Intm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SimManifoldArg {
    S2,
    So3,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NormArg {
    Ambient,
    Intrinsic,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TransformArg {
    Compositional,
    Preshape,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// CSV with header `subject_id,time,c1,..,cD`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "sphere")]
    pub manifold: KindArg,
    #[arg(long, value_enum, default_value = "frobenius")]
    pub so3_metric: MetricArg,
    #[arg(long, value_enum, default_value = "obs")]
    pub scheme: SchemeArg,
    /// Keep the fewest components reaching this fraction of variance.
    #[arg(long, conflicts_with = "k")]
    pub fve: Option<f64>,
    /// Keep exactly this many components.
    #[arg(long)]
    pub k: Option<usize>,
    /// Mean bandwidth; chosen by GCV when absent.
    #[arg(long)]
    pub h_mu: Option<f64>,
    /// Covariance bandwidth; twice the mean bandwidth when absent.
    #[arg(long)]
    pub h_gamma: Option<f64>,
    #[arg(long, default_value_t = 51)]
    pub grid_size: usize,
    /// Skip projecting the covariance surface onto tangent spaces.
    #[arg(long)]
    pub no_tangent_projection: bool,
    /// Project points within 1e-6 of the manifold instead of rejecting them.
    #[arg(long)]
    pub project_on_ingest: bool,
    /// Fit the extrinsic baseline in ambient coordinates and back-project.
    #[arg(long)]
    pub extrinsic: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "s2")]
    pub manifold: SimManifoldArg,
    #[arg(long, default_value_t = 1)]
    pub scenario: u32,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 6)]
    pub k_max: usize,
    #[arg(long, value_enum, default_value = "frobenius")]
    pub so3_metric: MetricArg,
    #[arg(long, value_enum, default_value = "ambient")]
    pub rmise_norm: NormArg,
    /// Override the number of subjects.
    #[arg(long)]
    pub n: Option<usize>,
    /// Override the maximum number of observations per subject.
    #[arg(long)]
    pub m_max: Option<usize>,
    /// Also write the first replicate's observations to `data.csv`.
    #[arg(long)]
    pub dump_data: bool,
    /// Write only `data.csv` and skip the study.
    #[arg(long)]
    pub data_only: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub kind: TransformArg,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Directory written by `rpace fit`.
    #[arg(long)]
    pub fit_dir: PathBuf,
    /// Score table to use instead of the directory's `scores.csv`.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

pub fn fit_config(args: &FitArgs) -> FitConfig {
    let truncation = match (args.k, args.fve) {
        (Some(k), _) => TruncationRule::Fixed(k),
        (None, Some(f)) => TruncationRule::Fve(f),
        (None, None) => TruncationRule::default(),
    };
    FitConfig {
        scheme: match args.scheme {
            SchemeArg::Obs => WeightScheme::Obs,
            SchemeArg::Subj => WeightScheme::Subj,
            SchemeArg::Intm => WeightScheme::Intm,
        },
        truncation,
        mean_bandwidth: args.h_mu,
        cov_bandwidth: args.h_gamma,
        grid_size: args.grid_size,
        tangent_projection: !args.no_tangent_projection,
        ..FitConfig::default()
    }
}

fn run_fit(args: &FitArgs) -> Result<()> {
    let opts = IngestOptions {
        kind: match args.manifold {
            KindArg::Sphere => ManifoldKind::Sphere,
            KindArg::So3 => ManifoldKind::So3,
            KindArg::Euclidean => ManifoldKind::Euclidean,
        },
        so3_metric: args.so3_metric.into(),
        project: args.project_on_ingest,
    };
    let data = ingest_csv(&args.input, &opts).stage("ingest")?;
    let config = fit_config(args);
    let result = if args.extrinsic {
        extrinsic_baseline(&data, &config)?
    } else {
        fit(&data, &config)?
    };
    emit_fit(&result, &args.out).stage("output")
}

pub fn scenario_config(args: &SimulateArgs) -> ScenarioConfig {
    let manifold = match args.manifold {
        SimManifoldArg::S2 => SimManifold::S2,
        SimManifoldArg::So3 => SimManifold::So3,
    };
    let mut config = ScenarioConfig::scenario(args.scenario, manifold);
    config.so3_metric = args.so3_metric.into();
    config.rmise_norm = match args.rmise_norm {
        NormArg::Ambient => RmiseNorm::Ambient,
        NormArg::Intrinsic => RmiseNorm::Intrinsic,
    };
    if let Some(r) = args.replicates {
        config.replicates = r;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(n) = args.n {
        config.n = n;
    }
    if let Some(m) = args.m_max {
        config.m_max = m;
    }
    config
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let config = scenario_config(args);
    config.validate().stage("simulation setup")?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    if args.dump_data || args.data_only {
        let (data, _) = generate(&config, &mut replicate_rng(config.seed, 0)).stage("generate")?;
        let path = args.out.join("data.csv");
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_table(BufWriter::new(f), &table_from_dataset(&data)).stage("output")?;
    }
    if args.data_only {
        return Ok(());
    }
    let report = run_study(&config, args.k_max).stage("study")?;
    report.write_to_dir(&args.out).stage("output")
}

fn run_transform(args: &TransformArgs) -> Result<()> {
    let f = File::open(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let table = read_table(std::io::BufReader::new(f)).stage("ingest")?;
    let kind = match args.kind {
        TransformArg::Compositional => TransformKind::Compositional,
        TransformArg::Preshape => TransformKind::Preshape,
    };
    let out = transform_table(&table, kind).stage("transform")?;
    let f = File::create(&args.output).map_err(|e| Error::io(&args.output, e))?;
    write_table(BufWriter::new(f), &out).stage("output")
}

fn run_reconstruct(args: &ReconstructArgs) -> Result<()> {
    let emitted = load_fit(&args.fit_dir, args.scores.as_deref()).stage("load fit")?;
    emitted.write_reconstruction(&args.output).stage("reconstruction")
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Transform(a) => run_transform(a),
        Command::Reconstruct(a) => run_reconstruct(a),
    }
}

/// Parse `args`, run the command and map errors to a failing exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
