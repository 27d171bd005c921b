//! Second-order ODE right-hand sides `c'' = f(c, c')` and Jacobian bounds.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Right-hand side of an autonomous second-order ODE `c'' = f(c, c')`.
pub trait SecondOrderRhs: Sync {
    fn dim(&self) -> usize;

    fn eval(&self, c: &DVector<f64>, c_prime: &DVector<f64>) -> Result<DVector<f64>>;

    /// Elementwise bounds on `|∂f_j/∂c_i|` and `|∂f_j/∂c'_i|` used to size the
    /// error of constructed curvature observations. The default takes central
    /// finite-difference Jacobians at the given points.
    fn bounds(
        &self,
        points: &[(DVector<f64>, DVector<f64>)],
        safety: f64,
    ) -> Result<JacobianBounds> {
        estimate_bounds(self, points, safety)
    }
}

/// Wraps a closure as a right-hand side.
pub struct FnRhs<F> {
    dim: usize,
    f: F,
}

impl<F> FnRhs<F>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> SecondOrderRhs for FnRhs<F>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, c: &DVector<f64>, c_prime: &DVector<f64>) -> Result<DVector<f64>> {
        Ok((self.f)(c, c_prime))
    }
}

/// `c'' = 0`, the geodesic equation of any constant metric.
#[derive(Debug, Clone, Copy)]
pub struct ZeroRhs(pub usize);

impl SecondOrderRhs for ZeroRhs {
    fn dim(&self) -> usize {
        self.0
    }

    fn eval(&self, _c: &DVector<f64>, _c_prime: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::zeros(self.0))
    }
}

/// Nonnegative `D × D` bounds; row index is the input dimension `i`, column
/// the output dimension `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianBounds {
    pub u: DMatrix<f64>,
    pub u_prime: DMatrix<f64>,
}

impl JacobianBounds {
    pub fn zero(dim: usize) -> Self {
        Self {
            u: DMatrix::zeros(dim, dim),
            u_prime: DMatrix::zeros(dim, dim),
        }
    }

    pub fn new(u: DMatrix<f64>, u_prime: DMatrix<f64>) -> Result<Self> {
        let ok = |m: &DMatrix<f64>| m.is_square() && m.iter().all(|v| v.is_finite() && *v >= 0.0);
        if !ok(&u) || !ok(&u_prime) || u.shape() != u_prime.shape() {
            return Err(contract(
                "Jacobian bounds must be square, finite and nonnegative",
            ));
        }
        Ok(Self { u, u_prime })
    }
}

/// Central finite-difference Jacobians `(∂f/∂c, ∂f/∂c')`, row = output.
pub fn fd_jacobians<R: SecondOrderRhs + ?Sized>(
    rhs: &R,
    c: &DVector<f64>,
    c_prime: &DVector<f64>,
    rel_step: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = c.len();
    let hc = rel_step * (1.0 + c.norm());
    let hv = rel_step * (1.0 + c_prime.norm());
    let mut jc = DMatrix::zeros(d, d);
    let mut jv = DMatrix::zeros(d, d);
    for i in 0..d {
        let mut up = c.clone();
        let mut dn = c.clone();
        up[i] += hc;
        dn[i] -= hc;
        let col = (rhs.eval(&up, c_prime)? - rhs.eval(&dn, c_prime)?) / (2.0 * hc);
        jc.set_column(i, &col);

        let mut up = c_prime.clone();
        let mut dn = c_prime.clone();
        up[i] += hv;
        dn[i] -= hv;
        let col = (rhs.eval(c, &up)? - rhs.eval(c, &dn)?) / (2.0 * hv);
        jv.set_column(i, &col);
    }
    Ok((jc, jv))
}

/// Elementwise max of `|Jacobian|ᵀ` over `points`, times `safety`.
pub fn estimate_bounds<R: SecondOrderRhs + ?Sized>(
    rhs: &R,
    points: &[(DVector<f64>, DVector<f64>)],
    safety: f64,
) -> Result<JacobianBounds> {
    if points.is_empty() {
        return Err(contract("bounds need at least one curve point"));
    }
    if !(safety.is_finite() && safety >= 0.0) {
        return Err(contract(format!(
            "safety factor must be finite and nonnegative, got {safety}"
        )));
    }
    let d = rhs.dim();
    let mut u = DMatrix::<f64>::zeros(d, d);
    let mut up = DMatrix::<f64>::zeros(d, d);
    for (c, v) in points {
        let (jc, jv) = fd_jacobians(rhs, c, v, 1e-5)?;
        u.zip_apply(&jc.transpose(), |acc, x| *acc = acc.max(x.abs()));
        up.zip_apply(&jv.transpose(), |acc, x| *acc = acc.max(x.abs()));
    }
    JacobianBounds::new(u * safety, up * safety)
}
