//! Local metrics from a Gaussian mixture: centers are component means and
//! tensors are inverse component covariances.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LocalMetric, MetricField};
use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub components: usize,
    pub iters: usize,
    pub seed: u64,
    /// Keep only the diagonal of each component covariance.
    pub diagonal: bool,
    /// Overrides the default weight decay.
    pub rho: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            components: 3,
            iters: 100,
            seed: 0,
            diagonal: false,
            rho: None,
        }
    }
}

/// Fits a full-covariance Gaussian mixture by EM with k-means++ seeding and
/// returns the induced metric field. Covariances are maximum-likelihood
/// (`1/N_k` normalized) plus `1e-6 · tr(Σ_k)/D · I`.
pub fn fit_local_metrics(data: &DMatrix<f64>, opts: &FitOptions) -> Result<MetricField> {
    let (p, d) = data.shape();
    let r = opts.components;
    if r == 0 || d == 0 {
        return Err(contract("fit_local_metrics needs R ≥ 1 and D ≥ 1"));
    }
    if p <= d * r {
        return Err(Error::InsufficientData(format!(
            "{p} points cannot fit {r} components in {d} dimensions (need more than {})",
            d * r
        )));
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(contract("data contains non-finite values"));
    }
    let rows: Vec<DVector<f64>> = (0..p).map(|i| data.row(i).transpose()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let global = covariance(
        &rows,
        &vec![1.0; p],
        &mean(&rows, &vec![1.0; p]),
        opts.diagonal,
    );
    let mut means = kmeans_pp(&rows, r, &mut rng);
    let mut covs = vec![global.clone(); r];
    let mut mix = vec![1.0 / r as f64; r];

    let mut resp = DMatrix::zeros(p, r);
    for _ in 0..opts.iters {
        // E-step
        let chols: Vec<_> = covs
            .iter()
            .map(|c| gaussian_parts(c))
            .collect::<Result<_>>()?;
        for (i, x) in rows.iter().enumerate() {
            let logs: Vec<f64> = (0..r)
                .map(|k| {
                    let (chol, log_det) = &chols[k];
                    let z = chol
                        .l_dirty()
                        .solve_lower_triangular(&(x - &means[k]))
                        .expect("positive diagonal");
                    mix[k].ln() - 0.5 * (z.norm_squared() + log_det)
                })
                .collect();
            let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logs.iter().map(|l| (l - max).exp()).sum();
            for k in 0..r {
                resp[(i, k)] = (logs[k] - max).exp() / total;
            }
        }
        // M-step
        for k in 0..r {
            let w: Vec<f64> = resp.column(k).iter().cloned().collect();
            let nk: f64 = w.iter().sum();
            if nk < 1e-8 * p as f64 {
                let far = farthest_point(&rows, &means);
                means[k] = rows[far].clone();
                covs[k] = global.clone();
                mix[k] = 1.0 / p as f64;
                continue;
            }
            means[k] = mean(&rows, &w);
            covs[k] = covariance(&rows, &w, &means[k], opts.diagonal);
            mix[k] = nk / p as f64;
        }
        let total: f64 = mix.iter().sum();
        mix.iter_mut().for_each(|m| *m /= total);
    }

    let components = means
        .into_iter()
        .zip(&covs)
        .map(|(mu, cov)| {
            let inv = cov
                .clone()
                .cholesky()
                .ok_or_else(|| contract("component covariance lost positive definiteness"))?
                .inverse();
            LocalMetric::new(mu, (&inv + inv.transpose()) * 0.5)
        })
        .collect::<Result<Vec<_>>>()?;
    match opts.rho {
        Some(rho) => MetricField::new(components, rho),
        None => MetricField::with_default_rho(components),
    }
}

fn mean(rows: &[DVector<f64>], w: &[f64]) -> DVector<f64> {
    let total: f64 = w.iter().sum();
    rows.iter()
        .zip(w)
        .fold(DVector::zeros(rows[0].len()), |acc, (x, wi)| acc + x * *wi)
        / total
}

fn covariance(rows: &[DVector<f64>], w: &[f64], mu: &DVector<f64>, diagonal: bool) -> DMatrix<f64> {
    let d = mu.len();
    let total: f64 = w.iter().sum();
    let mut c = rows
        .iter()
        .zip(w)
        .fold(DMatrix::zeros(d, d), |acc, (x, wi)| {
            let r = x - mu;
            acc + &r * r.transpose() * *wi
        })
        / total;
    if diagonal {
        c = DMatrix::from_diagonal(&c.diagonal());
    }
    let reg = 1e-6 * c.trace() / d as f64;
    let reg = if reg > 0.0 { reg } else { 1e-12 };
    for i in 0..d {
        c[(i, i)] += reg;
    }
    c
}

fn gaussian_parts(cov: &DMatrix<f64>) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| contract("component covariance is not positive definite"))?;
    let log_det = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|v| v.ln())
            .sum::<f64>();
    Ok((chol, log_det))
}

fn nearest_sq(x: &DVector<f64>, centers: &[DVector<f64>]) -> f64 {
    centers
        .iter()
        .map(|c| (x - c).norm_squared())
        .fold(f64::INFINITY, f64::min)
}

fn farthest_point(rows: &[DVector<f64>], centers: &[DVector<f64>]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in rows.iter().enumerate() {
        let d = nearest_sq(x, centers);
        if d > best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn kmeans_pp(rows: &[DVector<f64>], r: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let mut centers = vec![rows[rng.random_range(0..rows.len())].clone()];
    while centers.len() < r {
        let d2: Vec<f64> = rows.iter().map(|x| nearest_sq(x, &centers)).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = rows.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..rows.len())
        };
        centers.push(rows[pick].clone());
    }
    centers
}
