//! Fixed two-dimensional benchmark: a noisy circular arc and the three
//! component metric field fitted to it.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::manifold::{fit_local_metrics, FitOptions, MetricField};

pub const SEED: u64 = 7;
pub const POINTS: usize = 300;
pub const COMPONENTS: usize = 3;

/// `POINTS` samples at angles `U(0.15π, 0.85π)` and radius `1 + N(0, 0.08²)`.
pub fn dataset() -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let noise = Normal::new(0.0, 0.08).expect("valid normal");
    let mut data = DMatrix::zeros(POINTS, 2);
    for i in 0..POINTS {
        let theta = std::f64::consts::PI * rng.random_range(0.15..0.85);
        let r = 1.0 + noise.sample(&mut rng);
        data[(i, 0)] = r * theta.cos();
        data[(i, 1)] = r * theta.sin();
    }
    data
}

pub fn fit_options() -> FitOptions {
    FitOptions {
        components: COMPONENTS,
        iters: 100,
        seed: SEED,
        diagonal: false,
        rho: None,
    }
}

pub fn field() -> MetricField {
    fit_local_metrics(&dataset(), &fit_options()).expect("benchmark data supports the fit")
}

pub use crate::stats::data_covariance as sample_cov;

/// `count` pairs of distinct data points drawn with `seed`.
pub fn pairs(data: &DMatrix<f64>, count: usize, seed: u64) -> Vec<(DVector<f64>, DVector<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = data.nrows();
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..p);
            let mut j = rng.random_range(0..p - 1);
            if j >= i {
                j += 1;
            }
            (data.row(i).transpose(), data.row(j).transpose())
        })
        .collect()
}

/// `count` initial conditions `(x_i, x_j − x_i)` from pairs of data points, so
/// the geodesics start inside the data and head toward it.
pub fn initial_conditions(
    data: &DMatrix<f64>,
    count: usize,
    seed: u64,
) -> Vec<(DVector<f64>, DVector<f64>)> {
    pairs(data, count, seed)
        .into_iter()
        .map(|(a, b)| {
            let v = &b - &a;
            (a, v)
        })
        .collect()
}

/// `count` initial conditions: a data point and a velocity of norm in
/// `[0.3, 1.0]` with uniform direction. Many of these leave the data, where
/// the fitted metric is only extrapolated.
pub fn off_domain_initial_conditions(
    data: &DMatrix<f64>,
    count: usize,
    seed: u64,
) -> Vec<(DVector<f64>, DVector<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..data.nrows());
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = rng.random_range(0.3..1.0);
            (
                data.row(i).transpose(),
                DVector::from_vec(vec![speed * angle.cos(), speed * angle.sin()]),
            )
        })
        .collect()
}
