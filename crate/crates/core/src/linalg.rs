//! Small dense linear-algebra helpers shared by the GP code and the statistics.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How much diagonal jitter to try before giving up on a factorization.
///
/// Levels are `start, start·factor, ...` up to and including `max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterPolicy {
    pub start: f64,
    pub factor: f64,
    pub max: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            start: 1e-10,
            factor: 100.0,
            max: 1e-6,
        }
    }
}

impl JitterPolicy {
    fn levels(&self) -> impl Iterator<Item = f64> + '_ {
        let mut level = self.start;
        std::iter::from_fn(move || {
            if level > self.max * (1.0 + 1e-9) {
                return None;
            }
            let out = level;
            level *= self.factor.max(1.0 + 1e-9);
            Some(out)
        })
    }
}

/// Reference scale for the jitter added at each level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JitterScale {
    /// `level · A_ii` on each diagonal entry. Insensitive to blocks of very
    /// different magnitude, as in Gram matrices mixing values and curvatures.
    Diagonal,
    /// `level · mean(diag A)` on every diagonal entry.
    MeanDiagonal,
}

/// Cholesky factor together with the jitter that made it succeed.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    pub chol: Cholesky<f64, Dyn>,
    /// Per-entry amounts added to the diagonal.
    pub added: DVector<f64>,
    pub level: f64,
}

impl JitteredCholesky {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self
            .chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>()
    }

    /// `L⁻¹ B`
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }
}

pub fn factor_with_jitter(
    a: &DMatrix<f64>,
    policy: &JitterPolicy,
    scale: JitterScale,
) -> Result<JitteredCholesky> {
    let n = a.nrows();
    let diag = a.diagonal();
    let mean_diag = if n == 0 {
        1.0
    } else {
        diag.iter().map(|d| d.abs()).sum::<f64>() / n as f64
    };
    let mean_diag = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut last = policy.start;
    for level in policy.levels() {
        last = level;
        let added = DVector::from_iterator(
            n,
            diag.iter().map(|d| match scale {
                JitterScale::Diagonal => level * if *d > 0.0 { *d } else { mean_diag },
                JitterScale::MeanDiagonal => level * mean_diag,
            }),
        );
        let mut m = a.clone();
        for i in 0..n {
            m[(i, i)] += added[i];
        }
        if let Some(chol) = m.cholesky() {
            return Ok(JitteredCholesky { chol, added, level });
        }
    }
    Err(Error::IllConditioned {
        size: n,
        jitter: last,
        condition: condition_estimate(a),
    })
}

/// Ratio of extreme absolute eigenvalues; `inf` for singular input.
pub fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 1.0;
    }
    let sym = symmetrize(a);
    let eig = SymmetricEigen::new(sym).eigenvalues;
    let max = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Symmetrize and truncate negative eigenvalues to zero.
pub fn clamp_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    if eig.eigenvalues.iter().all(|v| *v >= 0.0) {
        return symmetrize(a);
    }
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    let q = &eig.eigenvectors;
    symmetrize(&(q * DMatrix::from_diagonal(&vals) * q.transpose()))
}

/// `Q √max(Λ, 0)`, so that `S Sᵀ` is the PSD projection of `a`.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// Whether `a` is symmetric PSD up to `tol` (relative to its largest eigenvalue).
pub fn is_psd(a: &DMatrix<f64>, tol: f64) -> bool {
    if !a.iter().all(|v| v.is_finite()) || !a.is_square() {
        return false;
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    if (a - a.transpose()).amax() > 1e-9 * scale {
        return false;
    }
    let eig = SymmetricEigen::new(symmetrize(a)).eigenvalues;
    let max = eig.max().max(0.0);
    eig.iter().all(|v| *v >= -tol * max.max(scale))
}

/// Dense multivariate-normal log density; used as an independent check.
pub fn mvn_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Option<f64> {
    let chol = cov.clone().cholesky()?;
    let r = x - mean;
    let quad = r.dot(&chol.solve(&r));
    let log_det = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    Some(-0.5 * (quad + log_det + x.len() as f64 * (2.0 * std::f64::consts::PI).ln()))
}
