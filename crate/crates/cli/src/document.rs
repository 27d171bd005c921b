//! JSON documents written by the commands. Field names are part of the
//! output contract; see `schemas/` at the repository root.

use nalgebra::{DMatrix, DVector};
use probgeo::gp::{CurveBelief, Functional};
use probgeo::linalg::clamp_psd;
use probgeo::solver::{EndpointDist, SolveReport};
use probgeo::stats::{sample_curves, MeanTrace, PgaResult, PrincipalGeodesic, TangentStatistic};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RESULT_SCHEMA_VERSION: u32 = 1;
/// Uniform output grid on `[0, 1]`.
pub const OUTPUT_NODES: usize = 101;

pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub schema_version: u32,
    pub command: String,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curve: Option<CurveDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lengths: Option<LengthsDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<ReportDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_trace: Option<MeanTraceDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pga: Option<PgaDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<ComparisonDoc>,
    pub timing: TimingDoc,
}

impl ResultDocument {
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        Self {
            schema_version: RESULT_SCHEMA_VERSION,
            command: command.to_string(),
            config: serde_json::to_value(config).expect("flag structs serialize"),
            curve: None,
            lengths: None,
            report: None,
            mean_trace: None,
            pga: None,
            comparison: None,
            timing: TimingDoc::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingDoc {
    pub wall_seconds: f64,
    /// Time spent inside the probabilistic solver, where it is separable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solve_seconds: Option<f64>,
}

/// Posterior curve on the output grid; every array has one entry per grid
/// node, each a `D`-vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveDoc {
    pub grid: Vec<f64>,
    pub mean: Matrix,
    pub std: Matrix,
    /// `mean − 2 std`
    pub lower: Matrix,
    /// `mean + 2 std`
    pub upper: Matrix,
    /// `samples[k][j]` is draw `k` at grid node `j`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<Matrix>>,
}

pub fn output_grid() -> Vec<f64> {
    (0..OUTPUT_NODES).map(|i| i as f64 / (OUTPUT_NODES - 1) as f64).collect()
}

impl CurveDoc {
    fn from_marginals(grid: Vec<f64>, marginals: Vec<(DVector<f64>, DVector<f64>)>) -> Self {
        let mut doc = CurveDoc { grid, mean: vec![], std: vec![], lower: vec![], upper: vec![], samples: None };
        for (m, var) in marginals {
            let s: Vec<f64> = var.iter().map(|v| v.max(0.0).sqrt()).collect();
            doc.lower.push(m.iter().zip(&s).map(|(m, s)| m - 2.0 * s).collect());
            doc.upper.push(m.iter().zip(&s).map(|(m, s)| m + 2.0 * s).collect());
            doc.mean.push(m.iter().copied().collect());
            doc.std.push(s);
        }
        doc
    }

    /// Mean and bands of `belief` on the output grid, plus `n_samples` joint draws.
    pub fn from_belief(belief: &CurveBelief, n_samples: usize, seed: u64) -> Result<Self, CliError> {
        let grid = output_grid();
        let queries: Vec<Functional> = grid.iter().map(|t| Functional::value(*t)).collect();
        let (mean, cov) = belief.posterior_joint(&queries)?;
        let d = belief.dim();
        let marginals = (0..grid.len())
            .map(|j| (mean.rows(j * d, d).into_owned(), DVector::from_fn(d, |k, _| cov[(j * d + k, j * d + k)])))
            .collect();
        let mut doc = Self::from_marginals(grid.clone(), marginals);
        if n_samples > 0 {
            let draws = sample_curves(belief, &grid, n_samples, seed)?;
            doc.samples = Some(draws.iter().map(|s| columns(&s.values)).collect());
        }
        Ok(doc)
    }

    /// The principal geodesic `γ(s)`, `s ∈ [−1, 1]`, reported at `t = (s + 1)/2`.
    pub fn from_principal(curve: &PrincipalGeodesic) -> Result<Self, CliError> {
        let grid = output_grid();
        let marginals = grid
            .iter()
            .map(|t| {
                let (belief, u) = curve.at(2.0 * t - 1.0);
                let q = Functional::value(u);
                Ok((belief.posterior_mean(q), belief.posterior_cov(q, q)?.diagonal()))
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(Self::from_marginals(grid, marginals))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthsDoc {
    pub mean: f64,
    pub std: f64,
    pub n_samples: usize,
}

impl LengthsDoc {
    pub fn from_lengths(lengths: &[f64]) -> Self {
        let n = lengths.len() as f64;
        let mean = lengths.iter().sum::<f64>() / n;
        let var = lengths.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self { mean, std: var.sqrt(), n_samples: lengths.len() }
    }
}

/// [`SolveReport`] without its timing; non-finite evidence becomes `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub grid: Vec<f64>,
    pub lambda_sq_final: f64,
    pub v_used: Matrix,
    pub bounds_u: Matrix,
    pub bounds_u_prime: Matrix,
    pub error_covs: Vec<Matrix>,
    pub refine_passes_done: usize,
    pub evidence_trace: Vec<(f64, Option<f64>)>,
}

impl From<&SolveReport> for ReportDoc {
    fn from(r: &SolveReport) -> Self {
        Self {
            grid: r.grid.clone(),
            lambda_sq_final: r.lambda_sq_final,
            v_used: rows(&r.v_used),
            bounds_u: rows(&r.bounds.u),
            bounds_u_prime: rows(&r.bounds.u_prime),
            error_covs: r.error_covs.iter().map(rows).collect(),
            refine_passes_done: r.refine_passes_done,
            evidence_trace: r.evidence_trace.iter().map(|(s, e)| (*s, e.is_finite().then_some(*e))).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointDoc {
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

impl From<&EndpointDist> for PointDoc {
    fn from(e: &EndpointDist) -> Self {
        Self { mean: e.mean.iter().copied().collect(), cov: rows(&clamp_psd(&e.cov)) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanTraceDoc {
    /// Starts at the Euclidean mean; the last entry is the estimate.
    pub iterates: Vec<PointDoc>,
    pub tangent_norms: Vec<f64>,
    pub step_size: f64,
    pub converged: bool,
    pub error: Option<String>,
}

impl From<&MeanTrace> for MeanTraceDoc {
    fn from(t: &MeanTrace) -> Self {
        Self {
            iterates: t.iterates.iter().map(PointDoc::from).collect(),
            tangent_norms: t.tangent_norms.clone(),
            step_size: t.step_size,
            converged: t.converged,
            error: t.error.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentDoc {
    pub mean: Vec<f64>,
    pub cov: Matrix,
    pub length_mean: f64,
    pub length_std: f64,
}

impl From<&TangentStatistic> for TangentDoc {
    fn from(t: &TangentStatistic) -> Self {
        Self { mean: t.mean.iter().copied().collect(), cov: rows(&t.cov), length_mean: t.length_mean(), length_std: t.length_std() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgaDoc {
    pub mean: PointDoc,
    /// Unit principal directions, by decreasing variance.
    pub directions: Matrix,
    pub variances: Vec<f64>,
    pub degenerate: Vec<bool>,
    /// Bootstrap covariance of each direction.
    pub direction_cov: Vec<Matrix>,
    /// Initial velocity of the forward half of the principal geodesic.
    pub velocity: Vec<f64>,
    pub tangents: Vec<TangentDoc>,
}

impl From<&PgaResult> for PgaDoc {
    fn from(p: &PgaResult) -> Self {
        Self {
            mean: PointDoc::from(&p.mean),
            directions: columns(&p.directions),
            variances: p.variances.iter().copied().collect(),
            degenerate: p.degenerate.clone(),
            direction_cov: p.direction_cov.iter().map(rows).collect(),
            velocity: p.principal_curve.velocity.iter().copied().collect(),
            tangents: p.tangents.iter().map(TangentDoc::from).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDoc {
    pub index: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub length_mean: Option<f64>,
    pub length_std: Option<f64>,
    pub lambda_sq: Option<f64>,
    pub oracle_length: Option<f64>,
    pub oracle_iters: Option<usize>,
    /// Oracle length within `mean ± 2 std`; `null` when either side failed.
    pub covered: Option<bool>,
    pub solver_error: Option<String>,
    pub oracle_error: Option<String>,
    pub timing: PairTimingDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTimingDoc {
    pub solver_seconds: f64,
    pub oracle_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonDoc {
    pub pairs: Vec<PairDoc>,
    pub summary: ComparisonSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub n_pairs: usize,
    /// Pairs where both solvers succeeded.
    pub n_compared: usize,
    pub n_solver_failed: usize,
    pub n_oracle_failed: usize,
    pub n_covered: usize,
    /// `n_covered / n_compared`; `null` when nothing was compared.
    pub coverage: Option<f64>,
    pub timing: ComparisonTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTiming {
    pub solver_seconds: f64,
    pub oracle_seconds: f64,
    /// `solver_seconds / oracle_seconds`
    pub runtime_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDocument {
    pub schema_version: u32,
    pub error: ErrorBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
    pub exit_code: i32,
}

pub fn rows(m: &DMatrix<f64>) -> Matrix {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn columns(m: &DMatrix<f64>) -> Matrix {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

/// Removes every `timing` object, leaving what must be bit-reproducible.
pub fn strip_timing(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.remove("timing");
            map.values_mut().for_each(strip_timing);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}
