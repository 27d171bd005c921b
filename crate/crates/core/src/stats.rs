//! Riemannian statistics with the solver's uncertainty carried along:
//! exponential and logarithm maps, curve lengths, Karcher means and
//! principal geodesic analysis.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::gp::{CurveBelief, Functional};
use crate::linalg;
use crate::manifold::MetricField;
use crate::oracle::trapezoid;
use crate::solver::{solve, EndpointDist, ProblemKind, ProblemSpec, SolveReport, SolverConfig};

pub const QUADRATURE_NODES: usize = 101;
pub const DEFAULT_LOG_SAMPLES: usize = 100;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_MEAN_ITERS: usize = 5;
pub const BOOTSTRAP_ROUNDS: usize = 20;
/// More than this fraction of zero-velocity samples makes a log map degenerate.
const MAX_DISCARD: f64 = 0.1;

pub fn quadrature_grid() -> Vec<f64> {
    (0..QUADRATURE_NODES)
        .map(|i| i as f64 / (QUADRATURE_NODES - 1) as f64)
        .collect()
}

/// One sampled curve: values and derivatives at `times`, one column per node.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSample {
    pub values: DMatrix<f64>,
    pub derivs: DMatrix<f64>,
}

/// Trapezoidal `∫ ‖c'(t)‖_{M(c(t))} dt` for each sample.
pub fn curve_length(
    times: &[f64],
    samples: &[CurveSample],
    field: &MetricField,
) -> Result<Vec<f64>> {
    if times.len() < 2 {
        return Err(contract("curve length needs at least two quadrature nodes"));
    }
    samples
        .iter()
        .map(|s| {
            if s.values.ncols() != times.len()
                || s.derivs.ncols() != times.len()
                || s.values.nrows() != field.dim()
            {
                return Err(contract("sample shape does not match the quadrature grid"));
            }
            let speeds: Vec<f64> = (0..times.len())
                .map(|k| {
                    field.norm_at(
                        &s.values.column(k).into_owned(),
                        &s.derivs.column(k).into_owned(),
                    )
                })
                .collect();
            Ok(trapezoid(times, &speeds))
        })
        .collect()
}

/// Joint draws of `(c, c')` on `times` from a curve posterior.
pub fn sample_curves(
    belief: &CurveBelief,
    times: &[f64],
    count: usize,
    seed: u64,
) -> Result<Vec<CurveSample>> {
    let n = times.len();
    let queries: Vec<Functional> = times
        .iter()
        .map(|t| Functional::value(*t))
        .chain(times.iter().map(|t| Functional::first(*t)))
        .collect();
    Ok(belief
        .joint_sample(&queries, count, seed)?
        .into_iter()
        .map(|m| CurveSample {
            values: m.columns(0, n).into_owned(),
            derivs: m.columns(n, n).into_owned(),
        })
        .collect())
}

/// Distribution of a tangent vector estimated from samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentStatistic {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n_samples: usize,
    /// Riemannian length of each kept sample curve.
    pub lengths: Vec<f64>,
    #[serde(skip)]
    pub samples: Vec<DVector<f64>>,
}

impl TangentStatistic {
    pub fn length_mean(&self) -> f64 {
        self.lengths.iter().sum::<f64>() / self.lengths.len() as f64
    }

    pub fn length_std(&self) -> f64 {
        let m = self.length_mean();
        let n = self.lengths.len() as f64;
        (self.lengths.iter().map(|l| (l - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    pub fn as_endpoint(&self) -> EndpointDist {
        EndpointDist {
            mean: self.mean.clone(),
            cov: self.cov.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExpMapResult {
    pub endpoint: EndpointDist,
    pub curve: CurveBelief,
    pub report: SolveReport,
}

#[derive(Debug, Clone)]
pub struct LogMapResult {
    pub tangent: TangentStatistic,
    pub curve: CurveBelief,
    pub report: SolveReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanTrace {
    pub iterates: Vec<EndpointDist>,
    /// `‖v̄_k‖` of the averaged tangent at each completed iteration.
    pub tangent_norms: Vec<f64>,
    pub step_size: f64,
    pub converged: bool,
    /// Inner failure that stopped the iteration early.
    pub error: Option<String>,
}

impl MeanTrace {
    pub fn last(&self) -> &EndpointDist {
        self.iterates
            .last()
            .expect("trace always holds the starting point")
    }
}

/// Principal geodesic as two initial value problems leaving the mean along
/// `+v` and `−v`.
#[derive(Debug, Clone)]
pub struct PrincipalGeodesic {
    pub velocity: DVector<f64>,
    pub forward: CurveBelief,
    pub backward: CurveBelief,
}

impl PrincipalGeodesic {
    /// Belief for `s ∈ [−1, 1]`; `s ≥ 0` runs along the forward curve at
    /// `t = s`, negative `s` along the backward curve at `t = −s`.
    pub fn at(&self, s: f64) -> (&CurveBelief, f64) {
        if s >= 0.0 {
            (&self.forward, s.min(1.0))
        } else {
            (&self.backward, (-s).min(1.0))
        }
    }
}

#[derive(Debug, Clone)]
pub struct PgaResult {
    pub mean: EndpointDist,
    /// Columns are principal directions, by descending variance.
    pub directions: DMatrix<f64>,
    pub variances: DVector<f64>,
    /// Directions whose variance is zero up to roundoff.
    pub degenerate: Vec<bool>,
    pub direction_cov: Vec<DMatrix<f64>>,
    pub tangents: Vec<TangentStatistic>,
    pub principal_curve: PrincipalGeodesic,
}

/// Solver settings and the sample covariance that fixes the output scale.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub field: MetricField,
    pub solver: SolverConfig,
    pub sample_cov: DMatrix<f64>,
}

impl Geometry {
    pub fn new(field: MetricField, solver: SolverConfig, sample_cov: DMatrix<f64>) -> Result<Self> {
        let d = field.dim();
        if sample_cov.shape() != (d, d) || !linalg::is_psd(&sample_cov, 1e-10) {
            return Err(contract("sample covariance must be a PSD D × D matrix"));
        }
        solver.validate()?;
        Ok(Self {
            field,
            solver,
            sample_cov,
        })
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn exp_map(&self, a: &EndpointDist, v: &EndpointDist) -> Result<ExpMapResult> {
        let spec = ProblemSpec::new(ProblemKind::Ivp, a.clone(), v.clone())?;
        let (curve, report) = solve(&spec, &self.field, &self.solver, &self.sample_cov)?;
        let (mean, cov) = curve.posterior_joint(&[Functional::value(1.0)])?;
        let endpoint = EndpointDist {
            mean,
            cov: linalg::clamp_psd(&cov),
        };
        Ok(ExpMapResult {
            endpoint,
            curve,
            report,
        })
    }

    /// `Log_a(b)` estimated from `n_samples` joint posterior curves: each gives
    /// `c'(0) / ‖c'(0)‖_{M(c(0))} · Length(c)`, so that `‖Log_a(b)‖_M` is the
    /// geodesic length and `Exp_a(Log_a(b)) = b`.
    pub fn log_map(
        &self,
        a: &EndpointDist,
        b: &EndpointDist,
        n_samples: usize,
        seed: u64,
    ) -> Result<LogMapResult> {
        if n_samples < 2 {
            return Err(contract("log map needs at least two samples"));
        }
        if (&b.mean - &a.mean).norm() == 0.0 {
            return Err(Error::DegenerateGeodesic(
                "log map between coincident points".into(),
            ));
        }
        let spec = ProblemSpec::new(ProblemKind::Bvp, a.clone(), b.clone())?;
        let (curve, report) = solve(&spec, &self.field, &self.solver, &self.sample_cov)?;
        let times = quadrature_grid();
        let samples = sample_curves(&curve, &times, n_samples, seed)?;
        let lengths = curve_length(&times, &samples, &self.field)?;
        let mut kept = Vec::with_capacity(n_samples);
        let mut kept_lengths = Vec::with_capacity(n_samples);
        for (s, len) in samples.iter().zip(lengths) {
            let v0 = s.derivs.column(0).into_owned();
            let norm = self.field.norm_at(&s.values.column(0).into_owned(), &v0);
            if v0.norm() < 1e-12 || !(norm > 0.0) {
                continue;
            }
            kept.push(v0 * (len / norm));
            kept_lengths.push(len);
        }
        let discarded = n_samples - kept.len();
        if discarded as f64 > MAX_DISCARD * n_samples as f64 || kept.len() < 2 {
            return Err(Error::DegenerateGeodesic(format!(
                "{discarded} of {n_samples} samples have zero initial velocity"
            )));
        }
        let (mean, cov) = mean_and_cov(&kept);
        let tangent = TangentStatistic {
            mean,
            cov,
            n_samples: kept.len(),
            lengths: kept_lengths,
            samples: kept,
        };
        Ok(LogMapResult {
            tangent,
            curve,
            report,
        })
    }

    /// Log maps from `from` to every row of `data`, in row order.
    fn log_maps_to(
        &self,
        from: &EndpointDist,
        data: &DMatrix<f64>,
        n_samples: usize,
        seed: u64,
    ) -> Vec<Result<TangentStatistic>> {
        let d = self.dim();
        par_map(data.nrows(), |i| {
            let x = EndpointDist::exact(data.row(i).transpose());
            // A point at the base has the zero tangent.
            if x.mean == from.mean {
                return Ok(TangentStatistic {
                    mean: DVector::zeros(d),
                    cov: DMatrix::zeros(d, d),
                    n_samples,
                    lengths: vec![0.0; n_samples],
                    samples: vec![DVector::zeros(d); n_samples],
                });
            }
            self.log_map(from, &x, n_samples, stream_seed(seed, i as u64))
                .map(|r| r.tangent)
        })
    }

    /// Gradient-descent Karcher mean from the Euclidean mean. Each step maps
    /// the averaged tangent `α v̄` (covariance `α² Σ_i cov_i / P²`) through the
    /// exponential map. Converged once `‖v̄‖ < 1e-4 · √tr(S_x)`.
    pub fn karcher_mean(
        &self,
        data: &DMatrix<f64>,
        alpha: f64,
        iters: usize,
        n_samples: usize,
        seed: u64,
    ) -> Result<MeanTrace> {
        let (p, d) = data.shape();
        if p == 0 || d != self.dim() {
            return Err(contract(
                "karcher mean needs at least one point of the field's dimension",
            ));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(contract(format!(
                "step size must lie in (0, 1], got {alpha}"
            )));
        }
        let scale = self.sample_cov.trace().max(0.0).sqrt();
        let start = EndpointDist::exact(data.row_mean().transpose());
        let mut trace = MeanTrace {
            iterates: vec![start],
            tangent_norms: Vec::new(),
            step_size: alpha,
            converged: false,
            error: None,
        };
        for k in 0..iters {
            let current = trace.last().clone();
            let tangents = self.log_maps_to(&current, data, n_samples, stream_seed(seed, k as u64));
            let tangents = match tangents.into_iter().collect::<Result<Vec<_>>>() {
                Ok(t) => t,
                Err(e) => {
                    trace.error = Some(e.to_string());
                    return Ok(trace);
                }
            };
            let v_bar = tangents
                .iter()
                .fold(DVector::zeros(d), |acc, t| acc + &t.mean)
                / p as f64;
            let v_cov = tangents
                .iter()
                .fold(DMatrix::zeros(d, d), |acc, t| acc + &t.cov)
                / (p * p) as f64;
            let norm = v_bar.norm();
            trace.tangent_norms.push(norm);
            let step = EndpointDist {
                mean: v_bar * alpha,
                cov: linalg::clamp_psd(&(v_cov * (alpha * alpha))),
            };
            match self.exp_map(&current, &step) {
                Ok(r) => trace.iterates.push(r.endpoint),
                Err(e) => {
                    trace.error = Some(e.to_string());
                    return Ok(trace);
                }
            }
            if norm < 1e-4 * scale {
                trace.converged = true;
                break;
            }
        }
        Ok(trace)
    }

    /// PCA of the log-map means at `mean`, with direction uncertainty from
    /// bootstrap rounds that redraw each point's tangent among its samples.
    pub fn pga(
        &self,
        data: &DMatrix<f64>,
        mean: &EndpointDist,
        n_samples: usize,
        seed: u64,
    ) -> Result<PgaResult> {
        let (p, d) = data.shape();
        if p < 2 || d != self.dim() {
            return Err(contract(
                "PGA needs at least two points of the field's dimension",
            ));
        }
        let tangents = self
            .log_maps_to(mean, data, n_samples, seed)
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let means: Vec<DVector<f64>> = tangents.iter().map(|t| t.mean.clone()).collect();
        let (directions, variances) = principal_directions(&means);
        let top = variances.max().max(0.0);
        let degenerate = variances
            .iter()
            .map(|v| *v <= 1e-12 * top.max(f64::MIN_POSITIVE))
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, u64::MAX));
        let mut boot: Vec<Vec<DVector<f64>>> = vec![Vec::with_capacity(BOOTSTRAP_ROUNDS); d];
        for _ in 0..BOOTSTRAP_ROUNDS {
            let draw: Vec<DVector<f64>> = tangents
                .iter()
                .map(|t| t.samples[rng.random_range(0..t.samples.len())].clone())
                .collect();
            let (dirs, _) = principal_directions(&draw);
            for j in 0..d {
                let mut col = dirs.column(j).into_owned();
                if col.dot(&directions.column(j)) < 0.0 {
                    col = -col;
                }
                boot[j].push(col);
            }
        }
        let direction_cov = boot.iter().map(|b| mean_and_cov(b).1).collect();

        let sigma = variances[0].max(0.0).sqrt();
        let velocity = directions.column(0) * (3.0 * sigma);
        let exact = |v: DVector<f64>| EndpointDist {
            mean: v,
            cov: DMatrix::zeros(d, d),
        };
        let forward = self.exp_map(mean, &exact(velocity.clone()))?.curve;
        let backward = self.exp_map(mean, &exact(-&velocity))?.curve;
        Ok(PgaResult {
            mean: mean.clone(),
            directions,
            variances,
            degenerate,
            direction_cov,
            tangents,
            principal_curve: PrincipalGeodesic {
                velocity,
                forward,
                backward,
            },
        })
    }
}

/// Maximum-likelihood covariance of the rows of `data` (`S_x`).
pub fn data_covariance(data: &DMatrix<f64>) -> DMatrix<f64> {
    let p = data.nrows().max(1) as f64;
    let mean = data.row_mean();
    let centered = DMatrix::from_fn(data.nrows(), data.ncols(), |i, j| data[(i, j)] - mean[j]);
    linalg::symmetrize(&(centered.transpose() * centered / p))
}

/// Sample mean and unbiased covariance.
fn mean_and_cov(xs: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mean = xs.iter().fold(DVector::zeros(d), |acc, x| acc + x) / n;
    let cov = xs.iter().fold(DMatrix::zeros(d, d), |acc, x| {
        let r = x - &mean;
        acc + &r * r.transpose()
    }) / (n - 1.0).max(1.0);
    (mean, linalg::symmetrize(&cov))
}

/// Eigenvectors of the sample covariance by descending eigenvalue, each signed
/// so its largest-magnitude entry is positive.
pub fn principal_directions(xs: &[DVector<f64>]) -> (DMatrix<f64>, DVector<f64>) {
    let (_, cov) = mean_and_cov(xs);
    let eig = SymmetricEigen::new(cov);
    let d = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let mut dirs = DMatrix::zeros(d, d);
    let mut vals = DVector::zeros(d);
    for (j, &k) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(k).into_owned();
        let lead = col
            .iter()
            .cloned()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            col = -col;
        }
        dirs.set_column(j, &col);
        vals[j] = eig.eigenvalues[k];
    }
    (dirs, vals)
}

/// Decorrelated per-task seed (SplitMix64 finalizer over the pair).
pub fn stream_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `(0..n).map(f)` in index order, run on the rayon pool when available.
pub fn par_map<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
