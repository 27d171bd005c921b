use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;
use probgeo::benchmark;
use serde_json::Value;

fn probgeo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probgeo")).current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(name);
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

fn assert_valid(name: &str, doc: &Value) {
    let v = schema(name);
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}");
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_csv(path: &Path, header: Option<&str>, data: &DMatrix<f64>) {
    let mut s = String::new();
    if let Some(h) = header {
        s.push_str(h);
        s.push('\n');
    }
    for r in data.row_iter() {
        let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    std::fs::write(path, s).unwrap();
}

const IDENTITY: &str = r#"{"schema_version":1,"rho":1.0,"components":[{"center":[0.0,0.0],"tensor":[[1.0,0.0],[0.0,1.0]]}]}"#;

fn identity_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("id.json"), IDENTITY).unwrap();
    dir
}

fn curve_mean(doc: &Value) -> Vec<Vec<f64>> {
    serde_json::from_value(doc["curve"]["mean"].clone()).unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Compares against a committed fixture, ignoring timing. Set
/// `PROBGEO_BLESS=1` to rewrite the fixture instead.
fn check_fixture(name: &str, mut doc: Value) {
    probgeo_cli::document::strip_timing(&mut doc);
    let path = fixture(name);
    let text = serde_json::to_string_pretty(&doc).unwrap() + "\n";
    if std::env::var_os("PROBGEO_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &text).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing fixture {}", path.display()));
    assert!(expected == text, "{name} differs from the committed fixture");
}

#[test]
fn fit_metric_recovers_blobs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = DMatrix::from_fn(120, 2, |i, j| {
        let center = if i % 2 == 0 { [0.0, 0.0] } else { [8.0, 3.0] };
        // Deterministic scatter with zero mean per blob.
        let k = (i / 2) as f64;
        center[j] + 0.5 * ((k * 1.7 + j as f64 * 2.3).sin())
    });
    write_csv(&dir.path().join("blobs.csv"), Some("x,y"), &data);
    let run = |out: &str| probgeo(dir.path(), &["fit-metric", "--data", "blobs.csv", "--components", "2", "--seed", "3", "--out", out]);
    let first = run("a.json");
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(String::from_utf8_lossy(&first.stdout).contains("2 components"));
    assert!(run("b.json").status.success());
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.json")).unwrap());

    let doc = read_json(&dir.path().join("a.json"));
    assert_valid("metric.schema.json", &doc);
    let centers: Vec<Vec<f64>> = doc["components"].as_array().unwrap().iter().map(|c| serde_json::from_value(c["center"].clone()).unwrap()).collect();
    for truth in [[0.0, 0.0], [8.0, 3.0]] {
        let best = centers.iter().map(|c| ((c[0] - truth[0]).powi(2) + (c[1] - truth[1]).powi(2)).sqrt()).fold(f64::INFINITY, f64::min);
        assert!(best < 0.2, "no center near {truth:?}: {centers:?}");
    }
}

#[test]
fn single_component_is_inverse_covariance() {
    let dir = tempfile::tempdir().unwrap();
    let data = benchmark::dataset();
    write_csv(&dir.path().join("d.csv"), None, &data);
    let out = probgeo(dir.path(), &["fit-metric", "--data", "d.csv", "--components", "1"]);
    assert!(out.status.success());
    let doc = stdout_json(&out);
    let tensor: Vec<Vec<f64>> = serde_json::from_value(doc["components"][0]["tensor"].clone()).unwrap();
    let mut cov = probgeo::stats::data_covariance(&data);
    let reg = 1e-6 * cov.trace() / 2.0;
    cov[(0, 0)] += reg;
    cov[(1, 1)] += reg;
    let inv = cov.try_inverse().unwrap();
    for i in 0..2 {
        for j in 0..2 {
            assert!((tensor[i][j] - inv[(i, j)]).abs() < 1e-8 * inv.amax());
        }
    }
}

#[test]
fn input_errors_are_usage_errors() {
    let dir = identity_dir();
    std::fs::write(dir.path().join("bad.csv"), "x,y\n1,2\n3,abc\n").unwrap();
    let out = probgeo(dir.path(), &["fit-metric", "--data", "bad.csv", "--components", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let doc = stdout_json(&out);
    assert_valid("error.schema.json", &doc);
    assert!(doc["error"]["message"].as_str().unwrap().contains("row 3, column 2"), "{doc}");

    std::fs::write(dir.path().join("few.csv"), "1,2\n3,4\n5,7\n").unwrap();
    let out = probgeo(dir.path(), &["fit-metric", "--data", "few.csv", "--components", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout_json(&out)["error"]["message"].as_str().unwrap().contains("insufficient data"));

    std::fs::write(dir.path().join("empty.csv"), "x,y\n").unwrap();
    for cmd in ["mean", "pga"] {
        let out = probgeo(dir.path(), &[cmd, "--data", "empty.csv", "--metric", "id.json"]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
    }
    let out = probgeo(dir.path(), &["compare", "--metric", "id.json", "--pairs", "empty.csv"]);
    assert_eq!(out.status.code(), Some(2));

    let out = probgeo(dir.path(), &["solve", "--kind", "bvp", "--metric", "id.json", "--start", "0,0", "--end", "1,1,1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = probgeo(dir.path(), &["solve", "--kind", "sideways"]);
    assert_eq!(out.status.code(), Some(2));
    let out = probgeo(dir.path(), &["solve", "--kind", "bvp", "--metric", "id.json", "--start", "0,0", "--end", "1,1", "--lambda-search", "fixed"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    // PSD but singular everywhere: the geodesic right-hand side cannot be evaluated.
    std::fs::write(
        dir.path().join("flat.json"),
        r#"{"schema_version":1,"rho":1.0,"components":[{"center":[0.0,0.0],"tensor":[[1.0,0.0],[0.0,0.0]]}]}"#,
    )
    .unwrap();
    let out = probgeo(dir.path(), &["solve", "--kind", "bvp", "--metric", "flat.json", "--start", "0,0", "--end", "1,1"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stdout));
    let doc = stdout_json(&out);
    assert_valid("error.schema.json", &doc);
}

#[test]
fn identity_bvp_is_a_straight_segment() {
    let dir = identity_dir();
    let out = probgeo(dir.path(), &["solve", "--kind", "bvp", "--metric", "id.json", "--start", "0,0", "--end", "1,1", "--emit-samples", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = stdout_json(&out);
    assert_valid("result.schema.json", &doc);
    let grid: Vec<f64> = serde_json::from_value(doc["curve"]["grid"].clone()).unwrap();
    let mean = curve_mean(&doc);
    let lower: Vec<Vec<f64>> = serde_json::from_value(doc["curve"]["lower"].clone()).unwrap();
    let upper: Vec<Vec<f64>> = serde_json::from_value(doc["curve"]["upper"].clone()).unwrap();
    assert_eq!(grid.len(), 101);
    for (j, t) in grid.iter().enumerate() {
        assert!((mean[j][0] - t).abs() < 1e-6 && (mean[j][1] - t).abs() < 1e-6);
        assert!(upper[j].iter().zip(&lower[j]).all(|(u, l)| u - l < 1e-3));
    }
    assert_eq!(doc["curve"]["samples"].as_array().unwrap().len(), 3);
    let len = doc["lengths"]["mean"].as_f64().unwrap();
    assert!((len - 2f64.sqrt()).abs() < 1e-4);
}

#[test]
fn uncertain_end_widens_the_band() {
    let dir = identity_dir();
    let out = probgeo(
        dir.path(),
        &["solve", "--kind", "bvp", "--metric", "id.json", "--start", "0,0", "--end", "1,1", "--uncertain-end", "cov=0.04"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = stdout_json(&out);
    let std: Vec<Vec<f64>> = serde_json::from_value(doc["curve"]["std"].clone()).unwrap();
    // The noisy end observation is fused with the prior, so the end std stays
    // below the observation's 0.2 but far above the exact-endpoint case.
    assert!(std[0][0] < 1e-3);
    assert!(std[100][0] > 0.05 && std[100][0] <= 0.2, "end std {}", std[100][0]);
    assert!(std[50][0] < std[100][0] && std[50][0] > 1e-2);
}

#[test]
fn identity_ivp_follows_the_velocity() {
    let dir = identity_dir();
    let out = probgeo(dir.path(), &["solve", "--kind", "ivp", "--metric", "id.json", "--start", "1,-1", "--end", "-0.5,2"]);
    assert!(out.status.success());
    let mean = curve_mean(&stdout_json(&out));
    assert!((mean[100][0] - 0.5).abs() < 1e-6 && (mean[100][1] - 1.0).abs() < 1e-6);
}

#[test]
fn solve_is_reproducible_apart_from_timing() {
    let dir = identity_dir();
    let args = ["solve", "--kind", "bvp", "--metric", "id.json", "--start", "0,0", "--end", "2,1", "--emit-samples", "2", "--seed", "5"];
    let mut a = stdout_json(&probgeo(dir.path(), &args));
    let mut b = stdout_json(&probgeo(dir.path(), &args));
    probgeo_cli::document::strip_timing(&mut a);
    probgeo_cli::document::strip_timing(&mut b);
    assert_eq!(a, b);
}

#[test]
fn identity_mean_and_pga_are_euclidean() {
    let dir = identity_dir();
    let data = DMatrix::from_row_slice(5, 2, &[0.0, 0.0, 2.0, 1.0, 4.0, 2.2, 1.0, 0.3, 3.0, 1.4]);
    write_csv(&dir.path().join("pts.csv"), Some("a,b"), &data);
    let out = probgeo(dir.path(), &["mean", "--data", "pts.csv", "--metric", "id.json", "--alpha", "1", "--iters", "1", "--n-samples", "20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let doc = stdout_json(&out);
    assert_valid("result.schema.json", &doc);
    let iterates = doc["mean_trace"]["iterates"].as_array().unwrap();
    let last: Vec<f64> = serde_json::from_value(iterates.last().unwrap()["mean"].clone()).unwrap();
    assert!((last[0] - 2.0).abs() < 2e-3 && (last[1] - 0.98).abs() < 2e-3, "{last:?}");

    let out = probgeo(dir.path(), &["pga", "--data", "pts.csv", "--metric", "id.json", "--mean", "2,0.98", "--n-samples", "20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let doc = stdout_json(&out);
    assert_valid("result.schema.json", &doc);
    let dir0: Vec<f64> = serde_json::from_value(doc["pga"]["directions"][0].clone()).unwrap();
    let centered: Vec<_> = data.row_iter().map(|r| r.transpose() - nalgebra::DVector::from_vec(vec![2.0, 0.98])).collect();
    let (pca, _) = probgeo::stats::principal_directions(&centered);
    let cos = (dir0[0] * pca[(0, 0)] + dir0[1] * pca[(1, 0)]).abs();
    assert!(cos > 0.999, "cosine {cos}");
    assert_eq!(doc["curve"]["mean"].as_array().unwrap().len(), 101);
}

#[test]
fn identity_compare_covers_every_pair() {
    let dir = identity_dir();
    let pairs = DMatrix::from_row_slice(3, 4, &[0.0, 0.0, 1.0, 1.0, -1.0, 2.0, 0.5, 0.0, 3.0, 3.0, 3.0, 4.0]);
    write_csv(&dir.path().join("pairs.csv"), None, &pairs);
    let out = probgeo(dir.path(), &["compare", "--metric", "id.json", "--pairs", "pairs.csv", "--out", "cmp.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("coverage 3/3"));
    let doc = read_json(&dir.path().join("cmp.json"));
    assert_valid("result.schema.json", &doc);
    assert_eq!(doc["comparison"]["summary"]["coverage"].as_f64(), Some(1.0));
    for p in doc["comparison"]["pairs"].as_array().unwrap() {
        let oracle = p["oracle_length"].as_f64().unwrap();
        let a: Vec<f64> = serde_json::from_value(p["a"].clone()).unwrap();
        let b: Vec<f64> = serde_json::from_value(p["b"].clone()).unwrap();
        let exact = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        assert!((oracle - exact).abs() < 1e-6);
        assert!((p["length_mean"].as_f64().unwrap() - exact).abs() < 1e-6 * exact.max(1.0) + 1e-4);
    }
}

/// Writes the benchmark data and its fitted metric (via the CLI) into `dir`.
fn benchmark_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_csv(&dir.path().join("arc.csv"), Some("x,y"), &benchmark::dataset());
    let out = probgeo(dir.path(), &["fit-metric", "--data", "arc.csv", "--components", "3", "--seed", "7", "--out", "arc.json"]);
    assert!(out.status.success());
    dir
}

#[test]
fn benchmark_metric_matches_the_library_fit() {
    let dir = benchmark_dir();
    let doc: probgeo::manifold::MetricFieldDoc = serde_json::from_value(read_json(&dir.path().join("arc.json"))).unwrap();
    assert_eq!(probgeo::manifold::MetricField::from_doc(&doc).unwrap(), benchmark::field());
}

#[test]
fn benchmark_solve_matches_fixture() {
    let dir = benchmark_dir();
    let (a, b) = benchmark::pairs(&benchmark::dataset(), 1, benchmark::SEED).remove(0);
    let fmt = |v: &nalgebra::DVector<f64>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let out = probgeo(
        dir.path(),
        &["solve", "--kind", "bvp", "--metric", "arc.json", "--data", "arc.csv", "--start", &fmt(&a), "--end", &fmt(&b), "--seed", "7", "--emit-samples", "2"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let doc = stdout_json(&out);
    assert_valid("result.schema.json", &doc);
    check_fixture("solve_benchmark.json", doc);
}

#[test]
fn benchmark_mean_matches_fixture() {
    let dir = benchmark_dir();
    let data = benchmark::dataset().rows(0, 20).into_owned();
    write_csv(&dir.path().join("twenty.csv"), None, &data);
    let out = probgeo(dir.path(), &["mean", "--data", "twenty.csv", "--metric", "arc.json", "--iters", "5", "--n-samples", "20", "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let doc = stdout_json(&out);
    assert_valid("result.schema.json", &doc);
    check_fixture("mean_benchmark.json", doc);
}

#[test]
fn benchmark_compare_reaches_ninety_percent_coverage() {
    let dir = benchmark_dir();
    let pairs = benchmark::pairs(&benchmark::dataset(), 20, benchmark::SEED);
    let rows = DMatrix::from_fn(20, 4, |i, j| if j < 2 { pairs[i].0[j] } else { pairs[i].1[j - 2] });
    write_csv(&dir.path().join("pairs.csv"), None, &rows);
    let out = probgeo(dir.path(), &["compare", "--metric", "arc.json", "--pairs", "pairs.csv", "--seed", "7"]);
    assert!(out.status.success());
    let doc = stdout_json(&out);
    assert_valid("result.schema.json", &doc);
    let summary = &doc["comparison"]["summary"];
    assert_eq!(summary["n_compared"].as_u64(), Some(20));
    assert!(summary["coverage"].as_f64().unwrap() >= 0.9, "{summary}");
}
