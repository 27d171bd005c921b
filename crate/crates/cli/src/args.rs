//! Command-line flags. Every struct here doubles as the `config` echo in the
//! output document, so field names are the snake_case form of the flags.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use probgeo::solver::{GridKind, LambdaSearch, SolverConfig};
use probgeo::stats::{DEFAULT_ALPHA, DEFAULT_LOG_SAMPLES, DEFAULT_MEAN_ITERS};
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "probgeo", version, about = "Probabilistic geodesics and statistics on learned Riemannian metrics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a metric field to a data CSV with a Gaussian mixture.
    FitMetric(FitMetricArgs),
    /// Solve one boundary or initial value geodesic problem.
    Solve(SolveArgs),
    /// Karcher mean of a data CSV.
    Mean(MeanArgs),
    /// Principal geodesic analysis of a data CSV.
    Pga(PgaArgs),
    /// Probabilistic vs. shooting lengths over a CSV of point pairs.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum HeaderMode {
    /// Treat the first row as a header when any field is non-numeric.
    Auto,
    Yes,
    No,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Comma-separated data, one point per row.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = HeaderMode::Auto)]
    pub header: HeaderMode,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MetricArgs {
    /// Metric field JSON written by `fit-metric`.
    #[arg(long)]
    pub metric: PathBuf,
    /// Replace the stored weight decay.
    #[arg(long)]
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutputArgs {
    /// Write the JSON document here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GridArg {
    Sigmoid,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchArg {
    Golden,
    Newton,
    Fixed,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 20)]
    pub n_points: usize,
    /// Defaults to sigmoid for BVPs and linear for IVPs.
    #[arg(long, value_enum)]
    pub grid_kind: Option<GridArg>,
    #[arg(long, default_value_t = 2)]
    pub refine_passes: usize,
    #[arg(long, value_enum, default_value_t = SearchArg::Golden)]
    pub lambda_search: SearchArg,
    /// Length scale for `--lambda-search fixed`.
    #[arg(long)]
    pub lambda_sq: Option<f64>,
    #[arg(long, default_value_t = 2.0)]
    pub bound_safety: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Posterior samples used for lengths and log maps.
    #[arg(long, default_value_t = DEFAULT_LOG_SAMPLES)]
    pub n_samples: usize,
}

impl SolverArgs {
    pub fn config(&self) -> Result<SolverConfig, CliError> {
        let lambda_search = match (self.lambda_search, self.lambda_sq) {
            (SearchArg::Fixed, Some(s)) => LambdaSearch::Fixed(s),
            (SearchArg::Fixed, None) => return Err(CliError::usage("--lambda-search fixed needs --lambda-sq")),
            (_, Some(_)) => return Err(CliError::usage("--lambda-sq only applies to --lambda-search fixed")),
            (SearchArg::Golden, None) => LambdaSearch::Golden,
            (SearchArg::Newton, None) => LambdaSearch::Newton,
        };
        let cfg = SolverConfig {
            n_points: self.n_points,
            grid_kind: self.grid_kind.map(|g| match g {
                GridArg::Sigmoid => GridKind::Sigmoid,
                GridArg::Linear => GridKind::Linear,
            }),
            refine_passes: self.refine_passes,
            lambda_search,
            bound_safety: self.bound_safety,
            seed: self.seed,
            ..SolverConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitMetricArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Number of mixture components.
    #[arg(long, default_value_t = 3)]
    pub components: usize,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep only diagonal covariances.
    #[arg(long)]
    pub diagonal: bool,
    #[arg(long)]
    pub rho: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KindArg {
    Bvp,
    Ivp,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SolveArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub metric: MetricArgs,
    /// Start point, comma-separated.
    #[arg(long, allow_hyphen_values = true)]
    pub start: String,
    /// End point (BVP) or initial velocity (IVP), comma-separated.
    #[arg(long, allow_hyphen_values = true)]
    pub end: String,
    /// `cov=<s>` for `s·I` or `cov=<D² row-major entries>`.
    #[arg(long)]
    pub uncertain_start: Option<String>,
    /// As `--uncertain-start`, for the end point or initial velocity.
    #[arg(long)]
    pub uncertain_end: Option<String>,
    /// Data CSV whose covariance is the fallback output covariance; identity otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = HeaderMode::Auto)]
    pub header: HeaderMode,
    /// Joint posterior curves to include in the document.
    #[arg(long, default_value_t = 0)]
    pub emit_samples: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MeanArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub metric: MetricArgs,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_MEAN_ITERS)]
    pub iters: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PgaArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub metric: MetricArgs,
    /// Tangent point; the Karcher mean is computed when absent.
    #[arg(long, allow_hyphen_values = true)]
    pub mean: Option<String>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_MEAN_ITERS)]
    pub iters: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompareArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub metric: MetricArgs,
    /// CSV of pairs, each row `a` followed by `b`.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, value_enum, default_value_t = HeaderMode::Auto)]
    pub header: HeaderMode,
    /// RK4 steps of the shooting oracle.
    #[arg(long, default_value_t = probgeo::oracle::DEFAULT_STEPS)]
    pub oracle_steps: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub oracle_tol: f64,
    #[arg(long, default_value_t = 50)]
    pub oracle_iters: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}
