//! Probabilistic solver for `c'' = f(c, c')` on `[0, 1]`.
//!
//! The curve prior is conditioned on (possibly uncertain) boundary or initial
//! values, then on a sequence of constructed second-derivative observations
//! `y_i = f(ĉ_i, ĉ'_i)` at representer points `t_i`, each carrying an error
//! covariance derived from the current posterior spread and Jacobian bounds.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::clock::Stopwatch;
use crate::error::{contract, Error, Result};
use crate::gp::{CurveBelief, Functional, MeanFn, Observation, ObservationSet, OutputCov};
use crate::kernel::LengthScale;
use crate::linalg::{self, JitterPolicy};
use crate::ode::{JacobianBounds, SecondOrderRhs};

/// Added to every endpoint covariance so exact conditions stay factorizable.
pub const ENDPOINT_FLOOR: f64 = 1e-10;

/// Gaussian belief over a point or a velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointDist {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl EndpointDist {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(contract(format!("endpoint covariance must be {d} × {d}")));
        }
        if !mean.iter().all(|v| v.is_finite()) || !linalg::is_psd(&cov, 1e-8) {
            return Err(contract(
                "endpoint mean must be finite and covariance symmetric PSD",
            ));
        }
        Ok(Self {
            mean,
            cov: linalg::symmetrize(&cov),
        })
    }

    pub fn exact(mean: DVector<f64>) -> Self {
        let d = mean.len();
        Self {
            mean,
            cov: DMatrix::zeros(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Bvp,
    Ivp,
}

/// `start` is `c(0)`; `end` is `c(1)` for boundary problems and `c'(0)` for
/// initial value problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    pub start: EndpointDist,
    pub end: EndpointDist,
}

impl ProblemSpec {
    pub fn new(kind: ProblemKind, start: EndpointDist, end: EndpointDist) -> Result<Self> {
        if start.dim() != end.dim() || start.dim() == 0 {
            return Err(contract(
                "problem endpoints must share one nonzero dimension",
            ));
        }
        Ok(Self { kind, start, end })
    }

    pub fn bvp(a: DVector<f64>, b: DVector<f64>) -> Result<Self> {
        Self::new(
            ProblemKind::Bvp,
            EndpointDist::exact(a),
            EndpointDist::exact(b),
        )
    }

    pub fn ivp(a: DVector<f64>, v: DVector<f64>) -> Result<Self> {
        Self::new(
            ProblemKind::Ivp,
            EndpointDist::exact(a),
            EndpointDist::exact(v),
        )
    }

    pub fn dim(&self) -> usize {
        self.start.dim()
    }

    /// `b − a` for boundary problems, `v` for initial value problems.
    pub fn direction(&self) -> DVector<f64> {
        match self.kind {
            ProblemKind::Bvp => &self.end.mean - &self.start.mean,
            ProblemKind::Ivp => self.end.mean.clone(),
        }
    }

    /// Straight line through the conditions.
    pub fn prior_mean(&self) -> MeanFn {
        MeanFn::linear(self.start.mean.clone(), self.direction())
            .expect("dimensions checked on construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Sigmoid,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaSearch {
    Newton,
    Golden,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub n_points: usize,
    /// `None` picks sigmoid for boundary and linear for initial value problems.
    pub grid_kind: Option<GridKind>,
    pub refine_passes: usize,
    pub lambda_search: LambdaSearch,
    pub jitter: JitterPolicy,
    pub bound_safety: f64,
    /// Seeds sampling done on top of a solve; the solve itself is deterministic.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_points: 20,
            grid_kind: None,
            refine_passes: 2,
            lambda_search: LambdaSearch::Golden,
            jitter: JitterPolicy::default(),
            bound_safety: 2.0,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 1 {
            return Err(contract("n_points must be at least 1"));
        }
        if !(self.bound_safety.is_finite() && self.bound_safety >= 1.0) {
            return Err(contract(format!(
                "bound_safety must be at least 1, got {}",
                self.bound_safety
            )));
        }
        if let LambdaSearch::Fixed(s) = self.lambda_search {
            LengthScale::new(s)?;
        }
        let j = &self.jitter;
        if !(j.start > 0.0 && j.max >= j.start && j.factor > 1.0) {
            return Err(contract(
                "jitter policy needs 0 < start ≤ max and factor > 1",
            ));
        }
        Ok(())
    }

    pub fn grid_kind_for(&self, kind: ProblemKind) -> GridKind {
        self.grid_kind.unwrap_or(match kind {
            ProblemKind::Bvp => GridKind::Sigmoid,
            ProblemKind::Ivp => GridKind::Linear,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub grid: Vec<f64>,
    pub lambda_sq_final: f64,
    pub v_used: DMatrix<f64>,
    pub bounds: JacobianBounds,
    pub error_covs: Vec<DMatrix<f64>>,
    pub refine_passes_done: usize,
    /// `(λ², log evidence)` for every solve attempted, in order.
    pub evidence_trace: Vec<(f64, f64)>,
    pub wall_time: f64,
}

impl SolveReport {
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time: 0.0,
            ..self.clone()
        }
    }
}

pub fn make_grid(n: usize, kind: GridKind) -> Result<Vec<f64>> {
    if n < 1 {
        return Err(contract("grid needs at least one point"));
    }
    Ok((1..=n)
        .map(|i| match kind {
            GridKind::Sigmoid => 0.5 * (1.0 + libm::erf(-1.5 + 3.0 * i as f64 / n as f64)),
            GridKind::Linear => i as f64 / (n + 1) as f64,
        })
        .collect())
}

/// `V = (dᵀ S_x d) · S_x` with `d` from [`ProblemSpec::direction`]; falls back
/// to `S_x` when the quadratic form is below `1e-12`.
pub fn choose_output_cov(spec: &ProblemSpec, sample_cov: &DMatrix<f64>) -> Result<OutputCov> {
    let d = spec.dim();
    if sample_cov.shape() != (d, d) || !linalg::is_psd(sample_cov, 1e-10) {
        return Err(contract(
            "sample covariance must be a symmetric PSD D × D matrix",
        ));
    }
    let dir = spec.direction();
    let scale = dir.dot(&(sample_cov * &dir));
    if scale < 1e-12 {
        OutputCov::new(sample_cov.clone())
    } else {
        OutputCov::new(sample_cov * scale)
    }
}

pub fn condition_on_endpoints(
    spec: &ProblemSpec,
    ls: LengthScale,
    out_cov: &OutputCov,
) -> Result<CurveBelief> {
    condition_with(spec, ls, out_cov, JitterPolicy::default())
}

fn condition_with(
    spec: &ProblemSpec,
    ls: LengthScale,
    out_cov: &OutputCov,
    jitter: JitterPolicy,
) -> Result<CurveBelief> {
    let d = spec.dim();
    let floor = DMatrix::<f64>::identity(d, d) * ENDPOINT_FLOOR;
    let second = match spec.kind {
        ProblemKind::Bvp => Functional::value(1.0),
        ProblemKind::Ivp => Functional::first(0.0),
    };
    let obs = ObservationSet::new(d)
        .with(Observation {
            functional: Functional::value(0.0),
            value: spec.start.mean.clone(),
            noise: &spec.start.cov + &floor,
        })?
        .with(Observation {
            functional: second,
            value: spec.end.mean.clone(),
            noise: &spec.end.cov + &floor,
        })?;
    CurveBelief::build_with(spec.prior_mean(), ls, out_cov.clone(), obs, jitter)
}

/// `Λ = UᵀΣ_cc U + |U'ᵀΣ_c'c U| + |UᵀΣ_cc' U'| + U'ᵀΣ_c'c' U'` (absolute values
/// elementwise), symmetrized and projected onto the PSD cone. `sigma` is the
/// joint `2D × 2D` covariance of `(c, c')`.
pub fn error_cov(sigma: &DMatrix<f64>, bounds: &JacobianBounds) -> DMatrix<f64> {
    let d = bounds.u.nrows();
    let (u, up) = (&bounds.u, &bounds.u_prime);
    let s_cc = sigma.view((0, 0), (d, d));
    let s_cv = sigma.view((0, d), (d, d));
    let s_vc = sigma.view((d, 0), (d, d));
    let s_vv = sigma.view((d, d), (d, d));
    let lambda = u.transpose() * s_cc * u
        + (up.transpose() * s_vc * u).abs()
        + (u.transpose() * s_cv * up).abs()
        + up.transpose() * s_vv * up;
    linalg::clamp_psd(&lambda)
}

/// Points `(c, c')` of the endpoint-conditioned prior mean at the grid.
fn prior_curve_points(belief: &CurveBelief, grid: &[f64]) -> Vec<(DVector<f64>, DVector<f64>)> {
    grid.iter()
        .map(|t| {
            (
                belief.posterior_mean(Functional::value(*t)),
                belief.posterior_mean(Functional::first(*t)),
            )
        })
        .collect()
}

fn eval_rhs<R: SecondOrderRhs + ?Sized>(
    rhs: &R,
    t: f64,
    c: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    let wrap = |message: String| Error::RhsEvaluation { t, message };
    let y = rhs.eval(c, v).map_err(|e| wrap(e.to_string()))?;
    if y.len() != c.len() || !y.iter().all(|x| x.is_finite()) {
        return Err(wrap(format!(
            "right-hand side returned a non-finite or mis-sized value {:?}",
            y.as_slice()
        )));
    }
    Ok(y)
}

/// One full solve at a fixed length scale.
fn solve_at<R: SecondOrderRhs + ?Sized>(
    spec: &ProblemSpec,
    rhs: &R,
    cfg: &SolverConfig,
    out_cov: &OutputCov,
    ls: LengthScale,
) -> Result<(CurveBelief, SolveReport)> {
    let clock = Stopwatch::start();
    let grid = make_grid(cfg.n_points, cfg.grid_kind_for(spec.kind))?;
    let mut belief = condition_with(spec, ls, out_cov, cfg.jitter)?;
    let bounds = rhs.bounds(&prior_curve_points(&belief, &grid), cfg.bound_safety)?;
    if bounds.u.nrows() != spec.dim() {
        return Err(contract(
            "Jacobian bounds do not match the problem dimension",
        ));
    }

    let mut error_covs = Vec::with_capacity(grid.len());
    for &t in &grid {
        let queries = [Functional::value(t), Functional::first(t)];
        let (mean, sigma) = belief.posterior_joint(&queries)?;
        let d = spec.dim();
        let c = mean.rows(0, d).into_owned();
        let v = mean.rows(d, d).into_owned();
        let y = eval_rhs(rhs, t, &c, &v)?;
        let lambda = error_cov(&sigma, &bounds);
        belief = belief.appended(Observation {
            functional: Functional::second(t),
            value: y,
            noise: lambda.clone(),
        })?;
        error_covs.push(lambda);
    }

    let belief = refine_with_grid(&belief, rhs, &grid, cfg.refine_passes)?;
    let report = SolveReport {
        grid,
        lambda_sq_final: ls.lambda_sq(),
        v_used: out_cov.matrix().clone(),
        bounds,
        error_covs,
        refine_passes_done: cfg.refine_passes,
        evidence_trace: vec![(ls.lambda_sq(), belief.log_marginal())],
        wall_time: clock.seconds(),
    };
    Ok((belief, report))
}

/// Re-evaluates every second-derivative observation at the current posterior
/// and swaps in the new values. The Gram factorization (including every
/// error covariance) is kept as is.
pub fn refine<R: SecondOrderRhs + ?Sized>(
    belief: &CurveBelief,
    rhs: &R,
    passes: usize,
) -> Result<CurveBelief> {
    let grid: Vec<f64> = belief
        .observations()
        .iter()
        .filter(|o| o.functional.order == 2)
        .map(|o| o.functional.t)
        .collect();
    if grid.is_empty() {
        return Err(contract(
            "refine needs a belief with second-derivative observations",
        ));
    }
    refine_with_grid(belief, rhs, &grid, passes)
}

fn refine_with_grid<R: SecondOrderRhs + ?Sized>(
    belief: &CurveBelief,
    rhs: &R,
    _grid: &[f64],
    passes: usize,
) -> Result<CurveBelief> {
    let mut current = belief.clone();
    for _ in 0..passes {
        let values = current
            .observations()
            .iter()
            .map(|o| {
                if o.functional.order != 2 {
                    return Ok(o.value.clone());
                }
                let t = o.functional.t;
                let c = current.posterior_mean(Functional::value(t));
                let v = current.posterior_mean(Functional::first(t));
                eval_rhs(rhs, t, &c, &v)
            })
            .collect::<Result<Vec<_>>>()?;
        current = current.with_values(values)?;
    }
    Ok(current)
}

struct Candidate {
    belief: CurveBelief,
    report: SolveReport,
}

impl Candidate {
    fn evidence(&self) -> f64 {
        self.report.evidence_trace[0].1
    }
}

/// Solves the problem, choosing λ² as configured. The returned report carries
/// the evidence of every candidate solve.
pub fn solve<R: SecondOrderRhs + ?Sized>(
    spec: &ProblemSpec,
    rhs: &R,
    cfg: &SolverConfig,
    sample_cov: &DMatrix<f64>,
) -> Result<(CurveBelief, SolveReport)> {
    cfg.validate()?;
    if rhs.dim() != spec.dim() {
        return Err(contract(
            "right-hand side dimension does not match the problem",
        ));
    }
    let clock = Stopwatch::start();
    let out_cov = choose_output_cov(spec, sample_cov)?;
    let (best, trace) = match cfg.lambda_search {
        LambdaSearch::Fixed(s) => {
            let c = attempt(spec, rhs, cfg, &out_cov, s)?;
            let trace = c.report.evidence_trace.clone();
            (c, trace)
        }
        LambdaSearch::Golden => golden(spec, rhs, cfg, &out_cov)?,
        LambdaSearch::Newton => newton(spec, rhs, cfg, &out_cov)?,
    };
    let mut report = best.report;
    report.evidence_trace = trace;
    report.wall_time = clock.seconds();
    Ok((best.belief, report))
}

/// Searches λ² for the largest evidence, re-solving at every candidate
/// because the observations depend on λ².
pub fn optimize_lambda<R: SecondOrderRhs + ?Sized>(
    spec: &ProblemSpec,
    rhs: &R,
    cfg: &SolverConfig,
    sample_cov: &DMatrix<f64>,
) -> Result<(f64, Vec<(f64, f64)>)> {
    cfg.validate()?;
    let out_cov = choose_output_cov(spec, sample_cov)?;
    let (best, trace) = match cfg.lambda_search {
        LambdaSearch::Fixed(_) => {
            return Err(contract(
                "optimize_lambda needs the newton or golden search",
            ))
        }
        LambdaSearch::Golden => golden(spec, rhs, cfg, &out_cov)?,
        LambdaSearch::Newton => newton(spec, rhs, cfg, &out_cov)?,
    };
    Ok((best.report.lambda_sq_final, trace))
}

fn attempt<R: SecondOrderRhs + ?Sized>(
    spec: &ProblemSpec,
    rhs: &R,
    cfg: &SolverConfig,
    out_cov: &OutputCov,
    lambda_sq: f64,
) -> Result<Candidate> {
    let (belief, report) = solve_at(spec, rhs, cfg, out_cov, LengthScale::new(lambda_sq)?)?;
    Ok(Candidate { belief, report })
}

/// Keeps the best finite-evidence candidate seen so far.
struct Tracker {
    trace: Vec<(f64, f64)>,
    best: Option<Candidate>,
    first_error: Option<Error>,
}

impl Tracker {
    fn new() -> Self {
        Self {
            trace: Vec::new(),
            best: None,
            first_error: None,
        }
    }

    /// Records the attempt and returns its log evidence (`-inf` on failure).
    fn record(&mut self, lambda_sq: f64, outcome: Result<Candidate>) -> f64 {
        match outcome {
            Ok(c) => {
                let e = c.evidence();
                self.trace.push((lambda_sq, e));
                if e.is_finite() && self.best.as_ref().is_none_or(|b| e > b.evidence()) {
                    self.best = Some(c);
                }
                if e.is_finite() {
                    e
                } else {
                    f64::NEG_INFINITY
                }
            }
            Err(err) => {
                self.trace.push((lambda_sq, f64::NEG_INFINITY));
                self.first_error.get_or_insert(err);
                f64::NEG_INFINITY
            }
        }
    }

    fn finish(self) -> Result<(Candidate, Vec<(f64, f64)>)> {
        match self.best {
            Some(b) => Ok((b, self.trace)),
            None => match self.first_error {
                // A deterministic failure (e.g. the rhs) is more useful than "no finite evidence".
                Some(e @ Error::RhsEvaluation { .. }) => Err(e),
                _ => Err(Error::OptimizationFailed { trace: self.trace }),
            },
        }
    }
}

const GOLDEN_RANGE: (f64, f64) = (1e-2, 1e1);
const GOLDEN_EVALS: usize = 30;

fn golden<R: SecondOrderRhs + ?Sized>(
    spec: &ProblemSpec,
    rhs: &R,
    cfg: &SolverConfig,
    out_cov: &OutputCov,
) -> Result<(Candidate, Vec<(f64, f64)>)> {
    let mut tracker = Tracker::new();
    let eval = |u: f64, tracker: &mut Tracker| {
        let s = u.exp();
        -tracker.record(s, attempt(spec, rhs, cfg, out_cov, s))
    };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (GOLDEN_RANGE.0.ln(), GOLDEN_RANGE.1.ln());
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = eval(x1, &mut tracker);
    let mut f2 = eval(x2, &mut tracker);
    for _ in 2..GOLDEN_EVALS {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = eval(x1, &mut tracker);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = eval(x2, &mut tracker);
        }
    }
    tracker.finish()
}

const NEWTON_START: f64 = 0.316;
const NEWTON_RANGE: (f64, f64) = (1e-4, 1e2);
const NEWTON_ITERS: usize = 20;
const NEWTON_TOL: f64 = 1e-6;
/// In `ln λ²`; the finite-difference sensitivities limit how far below this is meaningful.
const NEWTON_STEP_TOL: f64 = 1e-4;
/// Offset in `ln λ²` of the neighbouring solves used for sensitivities.
const SENSITIVITY_STEP: f64 = 1e-3;

/// `d/du` and `d²/du²` of `E = −2 log p` with `u = ln λ²`, where the
/// observations and their error covariances are regenerated at every `u`.
///
/// The gradient is the kernel term (observations held fixed) plus the chain
/// rule through every second-derivative observation, `∂E/∂y_i = 2 w_i` and
/// `∂E/∂Λ_i = (Γ⁻¹)_ii − w_i w_iᵀ`, with `dy_i/du`, `dΛ_i/du` from central
/// differences of the neighbouring solves. The curvature is the central
/// second difference of `E` over the same three solves.
pub fn total_evidence_derivatives(
    center: &CurveBelief,
    minus: &CurveBelief,
    plus: &CurveBelief,
    step: f64,
) -> (f64, f64) {
    let s = center.length_scale().lambda_sq();
    let (g_kernel, _) = center.evidence_derivatives();
    let d = center.dim();
    let w = center.resid_weights();
    let n = w.len();
    let g_inv = center
        .factor()
        .map(|f| f.chol.solve(&DMatrix::identity(n, n)))
        .unwrap_or_else(|| DMatrix::zeros(0, 0));
    let mut implicit = 0.0;
    for (p, ((o, om), op)) in center
        .observations()
        .iter()
        .zip(minus.observations().iter())
        .zip(plus.observations().iter())
        .enumerate()
    {
        if o.functional.order != 2 {
            continue;
        }
        let wi = w.rows(p * d, d);
        let dy = (&op.value - &om.value) / (2.0 * step);
        let dl = (&op.noise - &om.noise) / (2.0 * step);
        let sens = g_inv.view((p * d, p * d), (d, d)) - wi * wi.transpose();
        implicit += 2.0 * wi.dot(&dy) + sens.component_mul(&dl).sum();
    }
    let e = |b: &CurveBelief| -2.0 * b.log_marginal();
    let curvature = (e(plus) - 2.0 * e(center) + e(minus)) / (step * step);
    (s * g_kernel + implicit, curvature)
}

/// Safeguarded Newton on `u = ln λ²` with [`total_evidence_derivatives`]:
/// steps clipped to ±1, `λ²` kept in `[1e-4, 1e2]`, unit steps downhill where
/// the curvature is not positive, and step halving whenever the evidence
/// drops. Converges when the gradient with respect to λ² drops below `1e-6`
/// or the step in `ln λ²` below `1e-4`.
fn newton<R: SecondOrderRhs + ?Sized>(
    spec: &ProblemSpec,
    rhs: &R,
    cfg: &SolverConfig,
    out_cov: &OutputCov,
) -> Result<(Candidate, Vec<(f64, f64)>)> {
    let (lo, hi) = (NEWTON_RANGE.0.ln(), NEWTON_RANGE.1.ln());
    let mut tracker = Tracker::new();
    let mut u = NEWTON_START.ln();
    // Last accepted point, its evidence and the step taken from it.
    let mut accepted: Option<(f64, f64, f64)> = None;
    for _ in 0..NEWTON_ITERS {
        let s = u.exp().clamp(NEWTON_RANGE.0, NEWTON_RANGE.1);
        let center = attempt(spec, rhs, cfg, out_cov, s);
        let belief = center.as_ref().ok().map(|c| c.belief.clone());
        let e = tracker.record(s, center);
        if let Some((prev, e_prev, step)) = accepted {
            if !(e >= e_prev) {
                if step.abs() < NEWTON_STEP_TOL {
                    break;
                }
                u = prev + 0.5 * step;
                accepted = Some((prev, e_prev, 0.5 * step));
                continue;
            }
        }
        let Some(belief) = belief else { break };
        let probe = |v: f64| attempt(spec, rhs, cfg, out_cov, v.exp()).map(|c| c.belief);
        let (Ok(minus), Ok(plus)) = (probe(u - SENSITIVITY_STEP), probe(u + SENSITIVITY_STEP))
        else {
            break;
        };
        let (gu, hu) = total_evidence_derivatives(&belief, &minus, &plus, SENSITIVITY_STEP);
        if !(gu.is_finite() && hu.is_finite()) || (gu / s).abs() < NEWTON_TOL {
            break;
        }
        let step = if hu > 0.0 { -gu / hu } else { -gu.signum() };
        let next = (u + step.clamp(-1.0, 1.0)).clamp(lo, hi);
        if (next - u).abs() < NEWTON_STEP_TOL {
            break;
        }
        accepted = Some((u, e, next - u));
        u = next;
    }
    tracker.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{FnRhs, ZeroRhs};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    fn fixed(n: usize, s: f64) -> SolverConfig {
        SolverConfig {
            n_points: n,
            lambda_search: LambdaSearch::Fixed(s),
            ..Default::default()
        }
    }

    #[test]
    fn grids() {
        let s = make_grid(2, GridKind::Sigmoid).unwrap();
        assert_eq!(s[0], 0.5);
        assert_relative_eq!(s[1], 0.5 * (1.0 + libm::erf(1.5)), epsilon = 1e-15);
        assert_relative_eq!(s[1], 0.9830525732, epsilon = 1e-9);
        let l = make_grid(4, GridKind::Linear).unwrap();
        for (a, b) in l.iter().zip([0.2, 0.4, 0.6, 0.8]) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
        assert!(make_grid(0, GridKind::Linear).is_err());
        for n in 1..60 {
            for kind in [GridKind::Sigmoid, GridKind::Linear] {
                let g = make_grid(n, kind).unwrap();
                assert!(g.iter().all(|t| *t > 0.0 && *t < 1.0));
                assert!(g.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn output_covariance_choice() {
        let spec = ProblemSpec::bvp(v(&[0.0, 0.0]), v(&[1.0, 0.0])).unwrap();
        let id = DMatrix::identity(2, 2);
        assert_eq!(choose_output_cov(&spec, &id).unwrap().matrix(), &id);
        let s = DMatrix::from_diagonal(&v(&[4.0, 1.0]));
        assert_eq!(
            choose_output_cov(&spec, &s).unwrap().matrix(),
            &DMatrix::from_diagonal(&v(&[16.0, 4.0]))
        );
        let same = ProblemSpec::bvp(v(&[1.0, 1.0]), v(&[1.0, 1.0])).unwrap();
        assert_eq!(choose_output_cov(&same, &s).unwrap().matrix(), &s);
        let ivp = ProblemSpec::ivp(v(&[5.0, 5.0]), v(&[0.0, 2.0])).unwrap();
        assert_eq!(
            choose_output_cov(&ivp, &id).unwrap().matrix(),
            &(id.clone() * 4.0)
        );
        assert!(choose_output_cov(&spec, &DMatrix::from_diagonal(&v(&[1.0, -1.0]))).is_err());
    }

    #[test]
    fn endpoint_conditioning() {
        let ls = LengthScale::new(0.5).unwrap();
        let a = v(&[0.5, -1.0]);
        let b = v(&[2.0, 1.0]);
        let spec = ProblemSpec::bvp(a.clone(), b.clone()).unwrap();
        let belief = condition_on_endpoints(&spec, ls, &OutputCov::identity(2)).unwrap();
        assert!((belief.posterior_mean(Functional::value(0.0)) - &a).amax() < 1e-7);
        assert!((belief.posterior_mean(Functional::value(1.0)) - &b).amax() < 1e-7);
        for t in [0.1, 0.37, 0.9] {
            assert!(
                (belief.posterior_mean(Functional::value(t)) - (&a + (&b - &a) * t)).amax() < 1e-12
            );
        }
        let ivp = ProblemSpec::ivp(a.clone(), b.clone()).unwrap();
        let belief = condition_on_endpoints(&ivp, ls, &OutputCov::identity(2)).unwrap();
        assert!((belief.posterior_mean(Functional::first(0.0)) - &b).amax() < 1e-7);
    }

    #[test]
    fn error_cov_examples() {
        let zero = JacobianBounds::zero(2);
        let sigma = DMatrix::identity(4, 4);
        assert_eq!(error_cov(&sigma, &zero), DMatrix::zeros(2, 2));

        let ones = DMatrix::from_element(1, 1, 1.0);
        let b = JacobianBounds::new(ones.clone(), ones.clone()).unwrap();
        assert_relative_eq!(
            error_cov(&DMatrix::from_element(2, 2, 1.0), &b)[(0, 0)],
            4.0
        );

        let b = JacobianBounds::new(ones, DMatrix::from_element(1, 1, 2.0)).unwrap();
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 2.0]);
        assert_relative_eq!(error_cov(&sigma, &b)[(0, 0)], 11.0);
    }

    #[test]
    fn zero_rhs_reproduces_straight_lines() {
        let a = v(&[0.0, 1.0]);
        let b = v(&[3.0, -1.0]);
        let spec = ProblemSpec::bvp(a.clone(), b.clone()).unwrap();
        let (belief, report) = solve(
            &spec,
            &ZeroRhs(2),
            &fixed(20, 0.3),
            &DMatrix::identity(2, 2),
        )
        .unwrap();
        assert_eq!(report.error_covs.len(), 20);
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            let dev = (belief.posterior_mean(Functional::value(t)) - (&a + (&b - &a) * t)).norm();
            assert!(dev < 1e-6 * (&b - &a).norm(), "t = {t}: {dev}");
        }
        let spec = ProblemSpec::ivp(a.clone(), b.clone()).unwrap();
        let (belief, _) = solve(
            &spec,
            &ZeroRhs(2),
            &SolverConfig::default(),
            &DMatrix::identity(2, 2),
        )
        .unwrap();
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            assert!(
                (belief.posterior_mean(Functional::value(t)) - (&a + &b * t)).norm()
                    < 1e-6 * b.norm()
            );
        }
    }

    fn harmonic() -> FnRhs<impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Sync> {
        FnRhs::new(1, |c: &DVector<f64>, _v: &DVector<f64>| -c)
    }

    #[test]
    fn harmonic_bvp_approaches_sine() {
        let spec = ProblemSpec::bvp(v(&[0.0]), v(&[1f64.sin()])).unwrap();
        let (belief, _) = solve(
            &spec,
            &harmonic(),
            &SolverConfig::default(),
            &DMatrix::identity(1, 1),
        )
        .unwrap();
        for t in [0.25, 0.5, 0.75] {
            let m = belief.posterior_mean(Functional::value(t))[0];
            assert!((m - t.sin()).abs() < 1e-3, "t = {t}: {m} vs {}", t.sin());
        }
    }

    #[test]
    fn refine_keeps_gram_and_zero_rhs_is_a_fixpoint() {
        let spec = ProblemSpec::bvp(v(&[0.0]), v(&[1f64.sin()])).unwrap();
        let cfg = SolverConfig {
            refine_passes: 0,
            ..fixed(10, 0.3)
        };
        let (belief, _) = solve(&spec, &harmonic(), &cfg, &DMatrix::identity(1, 1)).unwrap();
        let refined = refine(&belief, &harmonic(), 3).unwrap();
        assert_eq!(belief.gram_digest(), refined.gram_digest());
        assert_ne!(belief.resid_weights(), refined.resid_weights());

        let (flat, _) = solve(&spec, &ZeroRhs(1), &cfg, &DMatrix::identity(1, 1)).unwrap();
        let again = refine(&flat, &ZeroRhs(1), 2).unwrap();
        for t in [0.1, 0.5, 0.8] {
            let d = (flat.posterior_mean(Functional::value(t))
                - again.posterior_mean(Functional::value(t)))
            .amax();
            assert!(d < 1e-12);
        }
    }

    #[test]
    fn rhs_failure_reports_location() {
        let bad = FnRhs::new(1, |c: &DVector<f64>, _v: &DVector<f64>| {
            if c[0] > 0.3 {
                v(&[f64::NAN])
            } else {
                c.clone()
            }
        });
        let spec = ProblemSpec::bvp(v(&[0.0]), v(&[1.0])).unwrap();
        let err = solve(&spec, &bad, &fixed(10, 0.3), &DMatrix::identity(1, 1)).unwrap_err();
        match err {
            Error::RhsEvaluation { t, .. } => assert!(t > 0.0 && t < 1.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lambda_search_stays_in_range() {
        let spec = ProblemSpec::bvp(v(&[0.0, 0.0]), v(&[1.0, 1.0])).unwrap();
        for search in [LambdaSearch::Golden, LambdaSearch::Newton] {
            let cfg = SolverConfig {
                lambda_search: search,
                n_points: 8,
                ..Default::default()
            };
            let (s, trace) =
                optimize_lambda(&spec, &ZeroRhs(2), &cfg, &DMatrix::identity(2, 2)).unwrap();
            assert!((1e-4..=1e2).contains(&s), "{search:?}: {s}");
            assert!(!trace.is_empty());
        }
        let cfg = SolverConfig {
            lambda_search: LambdaSearch::Golden,
            n_points: 8,
            ..Default::default()
        };
        let (_, trace) =
            optimize_lambda(&spec, &harmonic_2d(), &cfg, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(trace.len(), GOLDEN_EVALS);
        assert!(trace
            .iter()
            .all(|(s, _)| (1e-2 * 0.999..=1e1 * 1.001).contains(s)));
        assert!(
            optimize_lambda(&spec, &ZeroRhs(2), &fixed(5, 1.0), &DMatrix::identity(2, 2)).is_err()
        );
    }

    #[test]
    fn total_gradient_matches_resolved_evidence() {
        let rhs = FnRhs::new(2, |c: &DVector<f64>, w: &DVector<f64>| {
            DVector::from_vec(vec![-c[1] * w[0], 0.5 * w[0] * w[0] - c[0]])
        });
        let spec = ProblemSpec::bvp(v(&[0.0, 0.3]), v(&[1.2, -0.5])).unwrap();
        let cfg = SolverConfig {
            n_points: 10,
            ..Default::default()
        };
        let out = choose_output_cov(&spec, &DMatrix::identity(2, 2)).unwrap();
        let at = |u: f64| attempt(&spec, &rhs, &cfg, &out, u.exp()).unwrap().belief;
        let energy = |u: f64| -2.0 * at(u).log_marginal();
        // Away from the kinks that eigenvalue clamping puts into Λ(u).
        for u in [-1.5f64, 0.7] {
            let h = SENSITIVITY_STEP;
            let (g, _) = total_evidence_derivatives(&at(u), &at(u - h), &at(u + h), h);
            let r = 1e-5;
            let reference = (energy(u + r) - energy(u - r)) / (2.0 * r);
            assert_relative_eq!(g, reference, max_relative = 1e-4);
        }
    }

    fn harmonic_2d() -> FnRhs<impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Sync> {
        FnRhs::new(2, |c: &DVector<f64>, _v: &DVector<f64>| -c)
    }

    #[test]
    fn solve_is_deterministic() {
        let spec = ProblemSpec::bvp(v(&[0.0, 0.2]), v(&[1.0, -0.4])).unwrap();
        let cfg = SolverConfig {
            n_points: 10,
            ..Default::default()
        };
        let (b1, r1) = solve(&spec, &harmonic_2d(), &cfg, &DMatrix::identity(2, 2)).unwrap();
        let (b2, r2) = solve(&spec, &harmonic_2d(), &cfg, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(r1.without_timing(), r2.without_timing());
        assert_eq!(b1.gram_digest(), b2.gram_digest());
        assert_eq!(b1.resid_weights(), b2.resid_weights());
    }

    #[test]
    fn bad_config_is_rejected() {
        let spec = ProblemSpec::bvp(v(&[0.0]), v(&[1.0])).unwrap();
        let id = DMatrix::identity(1, 1);
        for cfg in [
            SolverConfig {
                n_points: 0,
                ..Default::default()
            },
            SolverConfig {
                bound_safety: 0.5,
                ..Default::default()
            },
            SolverConfig {
                lambda_search: LambdaSearch::Fixed(-1.0),
                ..Default::default()
            },
        ] {
            assert!(matches!(
                solve(&spec, &ZeroRhs(1), &cfg, &id),
                Err(Error::Contract(_))
            ));
        }
        assert!(solve(&spec, &ZeroRhs(2), &SolverConfig::default(), &id).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn exact_endpoints_hold_after_solving(
            a0 in -2.0f64..2.0, a1 in -2.0f64..2.0, b0 in -2.0f64..2.0, b1 in -2.0f64..2.0,
            s in 0.05f64..3.0, passes in 0usize..3, ivp in proptest::bool::ANY,
        ) {
            let (a, b) = (v(&[a0, a1]), v(&[b0, b1]));
            let spec = if ivp { ProblemSpec::ivp(a.clone(), b.clone()) } else { ProblemSpec::bvp(a.clone(), b.clone()) }.unwrap();
            let cfg = SolverConfig { refine_passes: passes, ..fixed(8, s) };
            let rhs = FnRhs::new(2, |c: &DVector<f64>, w: &DVector<f64>| v(&[-c[1] * w[0], 0.3 * c[0] - 0.1 * w[1]]));
            let (belief, _) = solve(&spec, &rhs, &cfg, &DMatrix::identity(2, 2)).unwrap();
            prop_assert!((belief.posterior_mean(Functional::value(0.0)) - &a).amax() < 1e-7);
            let end = if ivp { belief.posterior_mean(Functional::first(0.0)) } else { belief.posterior_mean(Functional::value(1.0)) };
            prop_assert!((end - &b).amax() < 1e-7);
        }

        #[test]
        fn variance_never_grows_as_observations_accrue(s in 0.05f64..3.0, t in 0.0f64..1.0, seed in 0u64..100) {
            let spec = ProblemSpec::bvp(v(&[0.0, 0.0]), v(&[1.0, 0.5])).unwrap();
            let ls = LengthScale::new(s).unwrap();
            let mut belief = condition_on_endpoints(&spec, ls, &OutputCov::identity(2)).unwrap();
            let q = Functional::value(t);
            let mut prev = belief.posterior_cov(q, q).unwrap().diagonal();
            let grid = make_grid(10, GridKind::Sigmoid).unwrap();
            for (i, ti) in grid.iter().enumerate() {
                let noise = DMatrix::identity(2, 2) * (((seed + i as u64) % 4) as f64 * 0.1);
                belief = belief.appended(Observation { functional: Functional::second(*ti), value: v(&[0.1, -0.2]), noise }).unwrap();
                let var = belief.posterior_cov(q, q).unwrap().diagonal();
                for k in 0..2 {
                    prop_assert!(var[k] <= prev[k] + 1e-9, "{} > {}", var[k], prev[k]);
                }
                prev = var;
            }
        }

        #[test]
        fn error_covariances_are_psd_and_vanish_with_bounds(scale in 0.0f64..3.0, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            let sigma = &a * a.transpose();
            let u = DMatrix::from_fn(2, 2, |_, _| rng.random_range(0.0..1.0) * scale);
            let up = DMatrix::from_fn(2, 2, |_, _| rng.random_range(0.0..1.0) * scale);
            let lambda = error_cov(&sigma, &JacobianBounds::new(u, up).unwrap());
            prop_assert!((&lambda - lambda.transpose()).amax() == 0.0);
            prop_assert!(nalgebra::SymmetricEigen::new(lambda.clone()).eigenvalues.min() >= -1e-12 * lambda.amax().max(1.0));
            prop_assert!(lambda.amax() <= 4.0 * scale * scale * sigma.amax() * 4.0 + 1e-12);
        }
    }
}
