//! Riemannian metric built from weighted local tensors,
//!
//! `M(x) = Σ_r w_r(x) M_r`,  `w_r ∝ exp(-ρ/2 (x - μ_r)ᵀ M_r (x - μ_r))`,
//!
//! and the geodesic equation it induces.

mod fit;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use fit::{fit_local_metrics, FitOptions};

use crate::error::{contract, Error, Result};
use crate::linalg;
use crate::ode::{estimate_bounds, fd_jacobians, JacobianBounds, SecondOrderRhs};

/// Metrics whose condition estimate exceeds this are treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalMetric {
    pub center: DVector<f64>,
    pub tensor: DMatrix<f64>,
}

impl LocalMetric {
    pub fn new(center: DVector<f64>, tensor: DMatrix<f64>) -> Result<Self> {
        if tensor.nrows() != center.len() || tensor.ncols() != center.len() {
            return Err(contract(
                "local metric tensor must be D × D for a D-dimensional center",
            ));
        }
        if !center.iter().all(|v| v.is_finite()) || !linalg::is_psd(&tensor, 1e-8) {
            return Err(contract(
                "local metric tensor must be finite, symmetric and positive semidefinite",
            ));
        }
        Ok(Self {
            center,
            tensor: linalg::symmetrize(&tensor),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricField {
    components: Vec<LocalMetric>,
    rho: f64,
}

impl MetricField {
    pub fn new(components: Vec<LocalMetric>, rho: f64) -> Result<Self> {
        if components.is_empty() {
            return Err(contract("a metric field needs at least one component"));
        }
        let d = components[0].center.len();
        if d == 0 || components.iter().any(|c| c.center.len() != d) {
            return Err(contract(
                "all local metrics must share one nonzero dimension",
            ));
        }
        if !(rho.is_finite() && rho > 0.0) {
            return Err(contract(format!(
                "rho must be finite and positive, got {rho}"
            )));
        }
        Ok(Self { components, rho })
    }

    /// Uses [`default_rho`].
    pub fn with_default_rho(components: Vec<LocalMetric>) -> Result<Self> {
        let rho = default_rho(&components);
        Self::new(components, rho)
    }

    /// Single component: the same tensor everywhere.
    pub fn constant(tensor: DMatrix<f64>) -> Result<Self> {
        let d = tensor.nrows();
        Self::new(vec![LocalMetric::new(DVector::zeros(d), tensor)?], 1.0)
    }

    pub fn dim(&self) -> usize {
        self.components[0].center.len()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn components(&self) -> &[LocalMetric] {
        &self.components
    }

    /// Normalized weights, computed with a max shift so the largest
    /// unnormalized weight is exactly 1.
    pub fn weights(&self, x: &DVector<f64>) -> DVector<f64> {
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let d = x - &c.center;
                -0.5 * self.rho * d.dot(&(&c.tensor * &d))
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w = DVector::from_iterator(logs.len(), logs.iter().map(|l| (l - max).exp()));
        let total = w.sum();
        w / total
    }

    pub fn metric(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let w = self.weights(x);
        let d = self.dim();
        self.components
            .iter()
            .zip(w.iter())
            .fold(DMatrix::zeros(d, d), |acc, (c, wr)| acc + &c.tensor * *wr)
    }

    /// `∂vec(M)/∂x` as a `D² × D` matrix; `vec` stacks rows, so row
    /// `a·D + b` holds the gradient of `M_ab`.
    pub fn metric_grad(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let w = self.weights(x);
        // s_r = ρ M_r (x - μ_r);  ∂w_r/∂x = w_r (s̄ - s_r)
        let s: Vec<DVector<f64>> = self
            .components
            .iter()
            .map(|c| &c.tensor * (x - &c.center) * self.rho)
            .collect();
        let s_bar = s
            .iter()
            .zip(w.iter())
            .fold(DVector::zeros(d), |acc, (sr, wr)| acc + sr * *wr);
        let mut g = DMatrix::zeros(d * d, d);
        for ((c, sr), wr) in self.components.iter().zip(&s).zip(w.iter()) {
            let dw = (&s_bar - sr) * *wr;
            for a in 0..d {
                for b in 0..d {
                    let m = c.tensor[(a, b)];
                    for k in 0..d {
                        g[(a * d + b, k)] += m * dw[k];
                    }
                }
            }
        }
        g
    }

    /// Geodesic equation from the Euler–Lagrange equations of the curve energy:
    ///
    /// `c'' = M⁻¹ (½ [∂vec M/∂c]ᵀ (c' ⊗ c') − Ṁ c')`,  `Ṁ = Σ_k ∂M/∂c_k c'_k`.
    ///
    /// The system is solved by Cholesky; metrics that fail to factor or whose
    /// condition estimate exceeds [`SINGULAR_CONDITION`] are rejected.
    pub fn geodesic_rhs(&self, c: &DVector<f64>, c_prime: &DVector<f64>) -> Result<DVector<f64>> {
        let d = self.dim();
        if c.len() != d || c_prime.len() != d {
            return Err(contract("geodesic_rhs: dimension mismatch"));
        }
        let m = self.metric(c);
        let singular = |condition: f64| Error::SingularMetric {
            location: c.iter().cloned().collect(),
            condition,
        };
        let chol = m
            .clone()
            .cholesky()
            .ok_or_else(|| singular(f64::INFINITY))?;
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        });
        let condition = (hi / lo).powi(2);
        if !(condition <= SINGULAR_CONDITION) {
            return Err(singular(condition));
        }
        let g = self.metric_grad(c);
        let mut quad = DVector::zeros(d);
        let mut m_dot = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in 0..d {
                let row = g.row(a * d + b);
                quad += row.transpose() * (c_prime[a] * c_prime[b]);
                m_dot[(a, b)] = row.dot(&c_prime.transpose());
            }
        }
        let rhs = quad * 0.5 - m_dot * c_prime;
        Ok(chol.solve(&rhs))
    }

    /// Central finite-difference Jacobians of [`Self::geodesic_rhs`] with
    /// respect to `c` and `c'` (row = output), step `1e-5 (1 + ‖·‖)`.
    pub fn rhs_jacobians(
        &self,
        c: &DVector<f64>,
        c_prime: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        fd_jacobians(self, c, c_prime, 1e-5)
    }

    pub fn estimate_bounds(
        &self,
        curve_points: &[(DVector<f64>, DVector<f64>)],
        safety: f64,
    ) -> Result<JacobianBounds> {
        estimate_bounds(self, curve_points, safety)
    }

    /// `‖v‖_{M(x)}`
    pub fn norm_at(&self, x: &DVector<f64>, v: &DVector<f64>) -> f64 {
        v.dot(&(self.metric(x) * v)).max(0.0).sqrt()
    }

    pub fn to_doc(&self) -> MetricFieldDoc {
        MetricFieldDoc {
            schema_version: METRIC_SCHEMA_VERSION,
            rho: self.rho,
            components: self
                .components
                .iter()
                .map(|c| ComponentDoc {
                    center: c.center.iter().cloned().collect(),
                    tensor: c
                        .tensor
                        .row_iter()
                        .map(|r| r.iter().cloned().collect())
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn from_doc(doc: &MetricFieldDoc) -> Result<Self> {
        if doc.schema_version != METRIC_SCHEMA_VERSION {
            return Err(contract(format!(
                "unsupported metric schema_version {}",
                doc.schema_version
            )));
        }
        let components = doc
            .components
            .iter()
            .enumerate()
            .map(|(r, c)| {
                let d = c.center.len();
                if c.tensor.len() != d || c.tensor.iter().any(|row| row.len() != d) {
                    return Err(contract(format!("component {r}: tensor must be {d} × {d}")));
                }
                let tensor = DMatrix::from_fn(d, d, |i, j| c.tensor[i][j]);
                LocalMetric::new(DVector::from_vec(c.center.clone()), tensor)
                    .map_err(|e| contract(format!("component {r}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(components, doc.rho)
    }
}

impl SecondOrderRhs for MetricField {
    fn dim(&self) -> usize {
        MetricField::dim(self)
    }

    fn eval(&self, c: &DVector<f64>, c_prime: &DVector<f64>) -> Result<DVector<f64>> {
        self.geodesic_rhs(c, c_prime)
    }
}

pub const METRIC_SCHEMA_VERSION: u32 = 1;

/// On-disk form of a [`MetricField`]; tensors are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricFieldDoc {
    pub schema_version: u32,
    pub rho: f64,
    pub components: Vec<ComponentDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentDoc {
    pub center: Vec<f64>,
    pub tensor: Vec<Vec<f64>>,
}

/// Weight decay that puts the exponent near −1 at the median inter-center
/// distance: `ρ = 2D / (mean_r tr(M_r) · median ‖μ_r − μ_s‖²)`. One component
/// gives 1 (the weight is constant anyway).
pub fn default_rho(components: &[LocalMetric]) -> f64 {
    if components.len() < 2 {
        return 1.0;
    }
    let d = components[0].center.len() as f64;
    let mean_trace =
        components.iter().map(|c| c.tensor.trace()).sum::<f64>() / components.len() as f64;
    let mut sq: Vec<f64> = Vec::new();
    for (i, a) in components.iter().enumerate() {
        for b in &components[i + 1..] {
            sq.push((&a.center - &b.center).norm_squared());
        }
    }
    sq.sort_by(|a, b| a.total_cmp(b));
    let n = sq.len();
    let median = if n % 2 == 1 {
        sq[n / 2]
    } else {
        0.5 * (sq[n / 2 - 1] + sq[n / 2])
    };
    let rho = 2.0 * d / (mean_trace * median);
    if rho.is_finite() && rho > 0.0 {
        rho
    } else {
        1.0
    }
}
