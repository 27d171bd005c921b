//! Browser bindings for the demo page in `www/`. Every call takes and returns
//! JSON strings so the page needs no generated type glue beyond wasm-bindgen.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use wasm_bindgen::prelude::*;

use probgeo::benchmark;
use probgeo::gp::{CurveBelief, Functional};
use probgeo::manifold::{fit_local_metrics, FitOptions, MetricField, MetricFieldDoc};
use probgeo::oracle::{oracle_length, shooting_bvp, DEFAULT_STEPS};
use probgeo::solver::{solve, ProblemSpec, SolverConfig};
use probgeo::stats::{curve_length, data_covariance, quadrature_grid, sample_curves};

const PLOT_NODES: usize = 61;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json(v: &impl Serialize) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(js_err)
}

fn parse_points(json: &str) -> Result<DMatrix<f64>, JsError> {
    let rows: Vec<[f64; 2]> = serde_json::from_str(json).map_err(js_err)?;
    if rows.is_empty() {
        return Err(JsError::new("no data points"));
    }
    Ok(DMatrix::from_fn(rows.len(), 2, |i, j| rows[i][j]))
}

fn parse_field(json: &str) -> Result<MetricField, JsError> {
    let doc: MetricFieldDoc = serde_json::from_str(json).map_err(js_err)?;
    MetricField::from_doc(&doc).map_err(js_err)
}

fn point(p: [f64; 2]) -> DVector<f64> {
    DVector::from_row_slice(&p)
}

/// The benchmark data set as `[[x, y], ...]`.
#[wasm_bindgen]
pub fn benchmark_points() -> Result<String, JsError> {
    let data = benchmark::dataset();
    let rows: Vec<[f64; 2]> = (0..data.nrows()).map(|i| [data[(i, 0)], data[(i, 1)]]).collect();
    to_json(&rows)
}

#[derive(Serialize)]
struct FitOut {
    metric: MetricFieldDoc,
    /// `log det M` on a `grid × grid` lattice over the data's bounding box.
    heat: Heat,
}

#[derive(Serialize)]
struct Heat {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    n: usize,
    values: Vec<f64>,
}

/// Fits the local-metric field to `points_json` and returns the metric
/// document plus a log-determinant map for shading.
#[wasm_bindgen]
pub fn fit_metric(points_json: &str, components: usize, seed: u64) -> Result<String, JsError> {
    let data = parse_points(points_json)?;
    let field = fit_local_metrics(&data, &FitOptions { components, seed, ..Default::default() }).map_err(js_err)?;
    let lo: Vec<f64> = data.column_iter().map(|c| c.min()).collect();
    let hi: Vec<f64> = data.column_iter().map(|c| c.max()).collect();
    let pad = 0.15 * (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let n = 48;
    let (x0, x1, y0, y1) = (lo[0] - pad, hi[0] + pad, lo[1] - pad, hi[1] + pad);
    let mut values = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let x = point([x0 + (x1 - x0) * (i as f64 + 0.5) / n as f64, y0 + (y1 - y0) * (j as f64 + 0.5) / n as f64]);
            values.push(field.metric(&x).determinant().max(f64::MIN_POSITIVE).ln());
        }
    }
    to_json(&FitOut { metric: field.to_doc(), heat: Heat { x0, x1, y0, y1, n, values } })
}

#[derive(Serialize)]
struct CurveOut {
    mean: Vec<[f64; 2]>,
    /// Per-node 2σ ellipse axes: `[sx, sy, rho]` of the marginal covariance.
    spread: Vec<[f64; 3]>,
    samples: Vec<Vec<[f64; 2]>>,
    oracle: Option<Vec<[f64; 2]>>,
    length_mean: f64,
    length_std: f64,
    oracle_length: Option<f64>,
    lambda_sq: f64,
    wall_ms: f64,
}

fn marginals(belief: &CurveBelief, times: &[f64]) -> Result<(Vec<[f64; 2]>, Vec<[f64; 3]>), JsError> {
    let mut mean = Vec::with_capacity(times.len());
    let mut spread = Vec::with_capacity(times.len());
    for t in times {
        let q = Functional::value(*t);
        let m = belief.posterior_mean(q);
        let c = belief.posterior_cov(q, q).map_err(js_err)?;
        let (sx, sy) = (c[(0, 0)].max(0.0).sqrt(), c[(1, 1)].max(0.0).sqrt());
        let rho = if sx > 0.0 && sy > 0.0 { (c[(0, 1)] / (sx * sy)).clamp(-1.0, 1.0) } else { 0.0 };
        mean.push([m[0], m[1]]);
        spread.push([sx, sy, rho]);
    }
    Ok((mean, spread))
}

fn length_stats(belief: &CurveBelief, field: &MetricField, seed: u64) -> Result<(f64, f64), JsError> {
    let grid = quadrature_grid();
    let samples = sample_curves(belief, &grid, 50, seed).map_err(js_err)?;
    let lengths = curve_length(&grid, &samples, field).map_err(js_err)?;
    let n = lengths.len() as f64;
    let m = lengths.iter().sum::<f64>() / n;
    let sd = (lengths.iter().map(|l| (l - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok((m, sd))
}

fn solve_between(
    field: &MetricField,
    sx: &DMatrix<f64>,
    a: [f64; 2],
    b: [f64; 2],
    n_points: usize,
) -> Result<(CurveBelief, f64), JsError> {
    let spec = ProblemSpec::bvp(point(a), point(b)).map_err(js_err)?;
    let cfg = SolverConfig { n_points, ..Default::default() };
    let (belief, report) = solve(&spec, field, &cfg, sx).map_err(js_err)?;
    Ok((belief, report.lambda_sq_final))
}

/// Boundary value problem from `a` to `b` on the fitted field: posterior mean,
/// marginal spread, `n_samples` joint sample paths and the shooting reference.
#[wasm_bindgen]
pub fn solve_geodesic(
    metric_json: &str,
    points_json: &str,
    a: Vec<f64>,
    b: Vec<f64>,
    n_points: usize,
    n_samples: usize,
    seed: u64,
) -> Result<String, JsError> {
    let (a, b) = (endpoint(&a)?, endpoint(&b)?);
    let field = parse_field(metric_json)?;
    let sx = data_covariance(&parse_points(points_json)?);
    let started = now_ms();
    let (belief, lambda_sq) = solve_between(&field, &sx, a, b, n_points)?;
    let wall_ms = now_ms() - started;

    let times: Vec<f64> = (0..PLOT_NODES).map(|i| i as f64 / (PLOT_NODES - 1) as f64).collect();
    let (mean, spread) = marginals(&belief, &times)?;
    let samples = if n_samples > 0 {
        let queries: Vec<Functional> = times.iter().map(|t| Functional::value(*t)).collect();
        belief
            .joint_sample(&queries, n_samples, seed)
            .map_err(js_err)?
            .iter()
            .map(|m| (0..m.ncols()).map(|k| [m[(0, k)], m[(1, k)]]).collect())
            .collect()
    } else {
        Vec::new()
    };
    let (length_mean, length_std) = length_stats(&belief, &field, seed.wrapping_add(1))?;
    let reference = shooting_bvp(&field, &point(a), &point(b), DEFAULT_STEPS, 1e-10, 50).ok();
    let oracle = reference.as_ref().map(|o| times.iter().map(|t| {
        let v = o.value_at(*t);
        [v[0], v[1]]
    }).collect());
    let oracle_len = reference.as_ref().map(|o| oracle_length(o, &field));
    to_json(&CurveOut { mean, spread, samples, oracle, length_mean, length_std, oracle_length: oracle_len, lambda_sq, wall_ms })
}

#[derive(Serialize)]
struct ConvergenceRow {
    n_points: usize,
    length_mean: f64,
    length_std: f64,
    midpoint_gap: f64,
}

#[derive(Serialize)]
struct ConvergenceOut {
    rows: Vec<ConvergenceRow>,
    oracle_length: Option<f64>,
}

/// Length estimate and its spread as the number of solver evaluations grows.
/// `midpoint_gap` is the distance between the posterior mean and the shooting
/// reference at `t = 0.5`.
#[wasm_bindgen]
pub fn convergence(metric_json: &str, points_json: &str, a: Vec<f64>, b: Vec<f64>, n_values: Vec<u32>) -> Result<String, JsError> {
    let (a, b) = (endpoint(&a)?, endpoint(&b)?);
    let field = parse_field(metric_json)?;
    let sx = data_covariance(&parse_points(points_json)?);
    let reference = shooting_bvp(&field, &point(a), &point(b), DEFAULT_STEPS, 1e-10, 50).ok();
    let mut rows = Vec::with_capacity(n_values.len());
    for n in n_values {
        let (belief, _) = solve_between(&field, &sx, a, b, n as usize)?;
        let (length_mean, length_std) = length_stats(&belief, &field, u64::from(n))?;
        let mid = belief.posterior_mean(Functional::value(0.5));
        let midpoint_gap = reference.as_ref().map_or(f64::NAN, |o| (mid - o.value_at(0.5)).norm());
        rows.push(ConvergenceRow { n_points: n as usize, length_mean, length_std, midpoint_gap });
    }
    to_json(&ConvergenceOut { rows, oracle_length: reference.as_ref().map(|o| oracle_length(o, &field)) })
}

fn endpoint(v: &[f64]) -> Result<[f64; 2], JsError> {
    match v {
        [x, y] if x.is_finite() && y.is_finite() => Ok([*x, *y]),
        _ => Err(JsError::new("endpoints must be two finite numbers")),
    }
}

#[cfg(target_arch = "wasm32")]
fn now_ms() -> f64 {
    #[wasm_bindgen]
    extern "C" {
        #[wasm_bindgen(js_namespace = Date)]
        fn now() -> f64;
    }
    now()
}

#[cfg(not(target_arch = "wasm32"))]
fn now_ms() -> f64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64() * 1e3)
}
