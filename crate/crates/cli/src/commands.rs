use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use probgeo::manifold::{fit_local_metrics, FitOptions, MetricField};
use probgeo::oracle::{oracle_length, shooting_bvp};
use probgeo::solver::{solve, EndpointDist, ProblemKind, ProblemSpec, SolverConfig};
use probgeo::stats::{curve_length, data_covariance, par_map, quadrature_grid, sample_curves, stream_seed, Geometry};

use crate::args::{CompareArgs, FitMetricArgs, KindArg, MeanArgs, PgaArgs, SolveArgs};
use crate::document::*;
use crate::input::{parse_cov, parse_vector, read_csv, read_metric};
use crate::CliError;

/// What a command produced: the JSON to write, a human summary, and whether
/// the run should still exit with a failure code.
pub struct Outcome {
    pub json: String,
    pub summary: String,
    pub failed: bool,
}

fn to_json(value: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("documents serialize");
    s.push('\n');
    s
}

fn check_samples(n: usize) -> Result<(), CliError> {
    if n < 2 {
        return Err(CliError::usage("--n-samples must be at least 2"));
    }
    Ok(())
}

fn check_dim(field: &MetricField, d: usize, what: &str) -> Result<(), CliError> {
    if d != field.dim() {
        return Err(CliError::usage(format!("{what} has dimension {d}, the metric has {}", field.dim())));
    }
    Ok(())
}

pub fn fit_metric(args: &FitMetricArgs) -> Result<Outcome, CliError> {
    let data = read_csv(&args.data.data, args.data.header)?;
    let opts = FitOptions { components: args.components, iters: args.iters, seed: args.seed, diagonal: args.diagonal, rho: args.rho };
    let field = fit_local_metrics(&data, &opts)?;
    let mut summary = format!("{} components, D = {}, rho = {:.6e}\n", field.components().len(), field.dim(), field.rho());
    for (i, c) in field.components().iter().enumerate() {
        let center: Vec<String> = c.center.iter().map(|v| format!("{v:.4}")).collect();
        summary.push_str(&format!("  {i}: center [{}], trace {:.4e}\n", center.join(", "), c.tensor.trace()));
    }
    Ok(Outcome { json: to_json(&field.to_doc()), summary, failed: false })
}

fn endpoint(mean: DVector<f64>, cov: Option<&str>, what: &str) -> Result<EndpointDist, CliError> {
    let d = mean.len();
    match cov {
        None => Ok(EndpointDist::exact(mean)),
        Some(text) => Ok(EndpointDist::new(mean, parse_cov(text, d, what)?)?),
    }
}

fn lengths(belief: &probgeo::gp::CurveBelief, field: &MetricField, n: usize, seed: u64) -> Result<LengthsDoc, CliError> {
    let times = quadrature_grid();
    let samples = sample_curves(belief, &times, n, seed)?;
    Ok(LengthsDoc::from_lengths(&curve_length(&times, &samples, field)?))
}

pub fn solve_cmd(args: &SolveArgs) -> Result<Outcome, CliError> {
    let clock = Instant::now();
    let cfg = args.solver.config()?;
    check_samples(args.solver.n_samples)?;
    let field = read_metric(&args.metric.metric, args.metric.rho)?;
    let a = parse_vector(&args.start, "--start")?;
    let b = parse_vector(&args.end, "--end")?;
    check_dim(&field, a.len(), "--start")?;
    check_dim(&field, b.len(), "--end")?;
    let kind = match args.kind {
        KindArg::Bvp => ProblemKind::Bvp,
        KindArg::Ivp => ProblemKind::Ivp,
    };
    let spec = ProblemSpec::new(
        kind,
        endpoint(a, args.uncertain_start.as_deref(), "--uncertain-start")?,
        endpoint(b, args.uncertain_end.as_deref(), "--uncertain-end")?,
    )?;
    let sample_cov = match &args.data {
        Some(path) => {
            let data = read_csv(path, args.header)?;
            check_dim(&field, data.ncols(), "--data")?;
            data_covariance(&data)
        }
        None => DMatrix::identity(field.dim(), field.dim()),
    };
    let (belief, report) = solve(&spec, &field, &cfg, &sample_cov)?;
    let mut doc = ResultDocument::new("solve", args);
    doc.curve = Some(CurveDoc::from_belief(&belief, args.emit_samples, stream_seed(cfg.seed, 1))?);
    let len = lengths(&belief, &field, args.solver.n_samples, stream_seed(cfg.seed, 0))?;
    let summary = format!(
        "{:?} solve: lambda^2 = {:.4e}, length = {:.6} +- {:.6} (2 sigma)\n",
        kind,
        report.lambda_sq_final,
        len.mean,
        2.0 * len.std
    );
    doc.lengths = Some(len);
    doc.report = Some(ReportDoc::from(&report));
    doc.timing = TimingDoc { wall_seconds: clock.elapsed().as_secs_f64(), solve_seconds: Some(report.wall_time) };
    Ok(Outcome { json: to_json(&doc), summary, failed: false })
}

fn geometry(field: MetricField, data: &DMatrix<f64>, cfg: SolverConfig) -> Result<Geometry, CliError> {
    if data.nrows() == 0 {
        return Err(CliError::usage("data has no points"));
    }
    check_dim(&field, data.ncols(), "--data")?;
    Ok(Geometry::new(field, cfg, data_covariance(data))?)
}

pub fn mean_cmd(args: &MeanArgs) -> Result<Outcome, CliError> {
    let clock = Instant::now();
    let cfg = args.solver.config()?;
    check_samples(args.solver.n_samples)?;
    let field = read_metric(&args.metric.metric, args.metric.rho)?;
    let data = read_csv(&args.data.data, args.data.header)?;
    let geo = geometry(field, &data, cfg)?;
    let trace = geo.karcher_mean(&data, args.alpha, args.iters, args.solver.n_samples, args.solver.seed)?;
    let last = trace.last();
    let summary = format!(
        "mean after {} steps: {:?} (converged: {}){}\n",
        trace.tangent_norms.len(),
        last.mean.as_slice(),
        trace.converged,
        trace.error.as_deref().map(|e| format!(", stopped: {e}")).unwrap_or_default()
    );
    let mut doc = ResultDocument::new("mean", args);
    doc.mean_trace = Some(MeanTraceDoc::from(&trace));
    doc.timing.wall_seconds = clock.elapsed().as_secs_f64();
    Ok(Outcome { json: to_json(&doc), summary, failed: trace.error.is_some() })
}

pub fn pga_cmd(args: &PgaArgs) -> Result<Outcome, CliError> {
    let clock = Instant::now();
    let cfg = args.solver.config()?;
    check_samples(args.solver.n_samples)?;
    let field = read_metric(&args.metric.metric, args.metric.rho)?;
    let data = read_csv(&args.data.data, args.data.header)?;
    let geo = geometry(field, &data, cfg)?;
    let mut doc = ResultDocument::new("pga", args);
    let mean = match &args.mean {
        Some(text) => {
            let m = parse_vector(text, "--mean")?;
            check_dim(&geo.field, m.len(), "--mean")?;
            EndpointDist::exact(m)
        }
        None => {
            let trace = geo.karcher_mean(&data, args.alpha, args.iters, args.solver.n_samples, args.solver.seed)?;
            doc.mean_trace = Some(MeanTraceDoc::from(&trace));
            if let Some(e) = &trace.error {
                return Err(CliError::Failure { kind: "mean_failed".into(), message: e.clone() });
            }
            trace.last().clone()
        }
    };
    let result = geo.pga(&data, &mean, args.solver.n_samples, stream_seed(args.solver.seed, 1 << 32))?;
    let summary = format!(
        "PGA at {:?}: variances {:?}, first direction {:?}\n",
        mean.mean.as_slice(),
        result.variances.as_slice(),
        result.directions.column(0).iter().collect::<Vec<_>>()
    );
    doc.curve = Some(CurveDoc::from_principal(&result.principal_curve)?);
    doc.pga = Some(PgaDoc::from(&result));
    doc.timing.wall_seconds = clock.elapsed().as_secs_f64();
    Ok(Outcome { json: to_json(&doc), summary, failed: false })
}

pub fn compare_cmd(args: &CompareArgs) -> Result<Outcome, CliError> {
    let clock = Instant::now();
    let cfg = args.solver.config()?;
    check_samples(args.solver.n_samples)?;
    let field = read_metric(&args.metric.metric, args.metric.rho)?;
    let pairs = read_csv(&args.pairs, args.header)?;
    let d = field.dim();
    if pairs.nrows() == 0 {
        return Err(CliError::usage("pairs file has no rows"));
    }
    if pairs.ncols() != 2 * d {
        return Err(CliError::usage(format!("pairs need {} columns (a then b), found {}", 2 * d, pairs.ncols())));
    }
    let sample_cov = DMatrix::identity(d, d);
    let results: Vec<PairDoc> = par_map(pairs.nrows(), |i| {
        let a = pairs.row(i).columns(0, d).transpose();
        let b = pairs.row(i).columns(d, d).transpose();
        let mut pair = PairDoc {
            index: i,
            a: a.iter().copied().collect(),
            b: b.iter().copied().collect(),
            length_mean: None,
            length_std: None,
            lambda_sq: None,
            oracle_length: None,
            oracle_iters: None,
            covered: None,
            solver_error: None,
            oracle_error: None,
            timing: PairTimingDoc { solver_seconds: 0.0, oracle_seconds: 0.0 },
        };
        let t = Instant::now();
        let prob = ProblemSpec::bvp(a.clone(), b.clone()).map_err(CliError::from).and_then(|spec| {
            let (belief, report) = solve(&spec, &field, &cfg, &sample_cov)?;
            Ok((lengths(&belief, &field, args.solver.n_samples, stream_seed(cfg.seed, i as u64))?, report.lambda_sq_final))
        });
        pair.timing.solver_seconds = t.elapsed().as_secs_f64();
        match prob {
            Ok((len, s)) => {
                pair.length_mean = Some(len.mean);
                pair.length_std = Some(len.std);
                pair.lambda_sq = Some(s);
            }
            Err(e) => pair.solver_error = Some(e.to_string()),
        }
        let t = Instant::now();
        match shooting_bvp(&field, &a, &b, args.oracle_steps, args.oracle_tol, args.oracle_iters) {
            Ok(sol) => {
                pair.oracle_length = Some(oracle_length(&sol, &field));
                pair.oracle_iters = Some(sol.shooting_iters);
            }
            Err(e) => pair.oracle_error = Some(e.to_string()),
        }
        pair.timing.oracle_seconds = t.elapsed().as_secs_f64();
        if let (Some(m), Some(s), Some(o)) = (pair.length_mean, pair.length_std, pair.oracle_length) {
            pair.covered = Some((o - m).abs() <= 2.0 * s);
        }
        pair
    });

    let n_compared = results.iter().filter(|p| p.covered.is_some()).count();
    let n_covered = results.iter().filter(|p| p.covered == Some(true)).count();
    let solver_seconds: f64 = results.iter().map(|p| p.timing.solver_seconds).sum();
    let oracle_seconds: f64 = results.iter().map(|p| p.timing.oracle_seconds).sum();
    let summary_doc = ComparisonSummary {
        n_pairs: results.len(),
        n_compared,
        n_solver_failed: results.iter().filter(|p| p.solver_error.is_some()).count(),
        n_oracle_failed: results.iter().filter(|p| p.oracle_error.is_some()).count(),
        n_covered,
        coverage: (n_compared > 0).then(|| n_covered as f64 / n_compared as f64),
        timing: ComparisonTiming {
            solver_seconds,
            oracle_seconds,
            runtime_ratio: (oracle_seconds > 0.0).then(|| solver_seconds / oracle_seconds),
        },
    };

    let mut table = format!("{:>5} {:>12} {:>12} {:>12} {:>8}\n", "pair", "mean", "2 std", "oracle", "covered");
    let show = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
    for p in &results {
        table.push_str(&format!(
            "{:>5} {:>12} {:>12} {:>12} {:>8}\n",
            p.index,
            show(p.length_mean),
            show(p.length_std.map(|s| 2.0 * s)),
            show(p.oracle_length),
            p.covered.map_or("-", |c| if c { "yes" } else { "no" })
        ));
    }
    table.push_str(&format!(
        "coverage {n_covered}/{n_compared}, solver/oracle runtime ratio {}\n",
        show(summary_doc.timing.runtime_ratio)
    ));

    let mut doc = ResultDocument::new("compare", args);
    doc.comparison = Some(ComparisonDoc { pairs: results, summary: summary_doc });
    doc.timing.wall_seconds = clock.elapsed().as_secs_f64();
    Ok(Outcome { json: to_json(&doc), summary: table, failed: false })
}
