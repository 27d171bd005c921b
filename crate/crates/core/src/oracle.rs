//! Classical reference solvers: fixed-step RK4 and Newton shooting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::manifold::MetricField;
use crate::ode::SecondOrderRhs;

pub const DEFAULT_STEPS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
    pub derivs: Vec<DVector<f64>>,
    /// Set by [`oracle_length`] callers; `None` straight out of the integrator.
    pub length: Option<f64>,
    pub shooting_iters: usize,
}

impl OracleSolution {
    pub fn end_value(&self) -> &DVector<f64> {
        self.values.last().expect("at least two nodes")
    }

    /// Cubic Hermite interpolation of the value at `t ∈ [0, 1]`; assumes uniform steps.
    pub fn value_at(&self, t: f64) -> DVector<f64> {
        let n = self.times.len() - 1;
        let x = (t.clamp(0.0, 1.0) * n as f64).min(n as f64);
        let i = (x.floor() as usize).min(n - 1);
        let w = x - i as f64;
        let h = self.times[i + 1] - self.times[i];
        let (h00, h10, h01, h11) = (
            2.0 * w.powi(3) - 3.0 * w.powi(2) + 1.0,
            w.powi(3) - 2.0 * w.powi(2) + w,
            -2.0 * w.powi(3) + 3.0 * w.powi(2),
            w.powi(3) - w.powi(2),
        );
        &self.values[i] * h00
            + &self.derivs[i] * (h10 * h)
            + &self.values[i + 1] * h01
            + &self.derivs[i + 1] * (h11 * h)
    }
}

/// Classic RK4 on `(c, c')' = (c', f(c, c'))` over `[0, 1]`.
pub fn rk4_ivp<R: SecondOrderRhs + ?Sized>(
    rhs: &R,
    a: &DVector<f64>,
    v: &DVector<f64>,
    steps: usize,
) -> Result<OracleSolution> {
    if steps < 1 {
        return Err(contract("rk4 needs at least one step"));
    }
    if a.len() != v.len() || a.len() != rhs.dim() {
        return Err(contract("rk4: dimension mismatch"));
    }
    let h = 1.0 / steps as f64;
    let mut times = Vec::with_capacity(steps + 1);
    let mut values = Vec::with_capacity(steps + 1);
    let mut derivs = Vec::with_capacity(steps + 1);
    let (mut c, mut w) = (a.clone(), v.clone());
    times.push(0.0);
    values.push(c.clone());
    derivs.push(w.clone());
    for k in 0..steps {
        let k1c = w.clone();
        let k1w = rhs.eval(&c, &w)?;
        let k2c = &w + &k1w * (h / 2.0);
        let k2w = rhs.eval(&(&c + &k1c * (h / 2.0)), &k2c)?;
        let k3c = &w + &k2w * (h / 2.0);
        let k3w = rhs.eval(&(&c + &k2c * (h / 2.0)), &k3c)?;
        let k4c = &w + &k3w * h;
        let k4w = rhs.eval(&(&c + &k3c * h), &k4c)?;
        c += (k1c + &k2c * 2.0 + &k3c * 2.0 + k4c) * (h / 6.0);
        w += (k1w + k2w * 2.0 + k3w * 2.0 + k4w) * (h / 6.0);
        if !c.iter().chain(w.iter()).all(|x| x.is_finite()) {
            return Err(Error::OracleFailure(format!(
                "rk4 diverged at t = {}",
                (k + 1) as f64 * h
            )));
        }
        times.push((k + 1) as f64 * h);
        values.push(c.clone());
        derivs.push(w.clone());
    }
    Ok(OracleSolution {
        times,
        values,
        derivs,
        length: None,
        shooting_iters: 0,
    })
}

/// Newton iteration on the initial velocity with a central-difference
/// Jacobian and step halving (up to 8 times) whenever the residual grows.
/// Starts from `v = b − a`; converged when `‖g‖ < tol (1 + ‖b − a‖)`.
pub fn shooting_bvp<R: SecondOrderRhs + ?Sized>(
    rhs: &R,
    a: &DVector<f64>,
    b: &DVector<f64>,
    steps: usize,
    tol: f64,
    max_iters: usize,
) -> Result<OracleSolution> {
    if !(tol > 0.0) {
        return Err(contract("shooting tolerance must be positive"));
    }
    let d = a.len();
    let target = tol * (1.0 + (b - a).norm());
    let residual = |v: &DVector<f64>| -> Result<(OracleSolution, DVector<f64>)> {
        let sol = rk4_ivp(rhs, a, v, steps)?;
        let g = sol.end_value() - b;
        Ok((sol, g))
    };
    let mut v = b - a;
    let (mut sol, mut g) = residual(&v)?;
    for iter in 0..=max_iters {
        if g.norm() < target {
            sol.shooting_iters = iter;
            return Ok(sol);
        }
        if iter == max_iters {
            break;
        }
        let h = 1e-6 * (1.0 + v.norm());
        let mut jac = DMatrix::zeros(d, d);
        for k in 0..d {
            let mut up = v.clone();
            let mut dn = v.clone();
            up[k] += h;
            dn[k] -= h;
            let col = (residual(&up)?.1 - residual(&dn)?.1) / (2.0 * h);
            jac.set_column(k, &col);
        }
        let step = jac.lu().solve(&(-&g)).ok_or_else(|| {
            Error::OracleFailure(format!("singular shooting Jacobian at iteration {iter}"))
        })?;
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=8 {
            let trial = &v + &step * scale;
            if let Ok((s, gt)) = residual(&trial) {
                if gt.norm() < g.norm() {
                    accepted = Some((trial, s, gt));
                    break;
                }
            }
            scale *= 0.5;
        }
        match accepted {
            Some((nv, s, ng)) => {
                v = nv;
                sol = s;
                g = ng;
            }
            None => {
                return Err(Error::OracleFailure(format!(
                    "shooting stalled at iteration {iter} with residual {:e}",
                    g.norm()
                )))
            }
        }
    }
    Err(Error::OracleFailure(format!(
        "shooting did not converge in {max_iters} iterations (residual {:e})",
        g.norm()
    )))
}

/// Trapezoidal `∫ ‖c'‖_{M(c)} dt` over the solution's nodes.
pub fn oracle_length(sol: &OracleSolution, field: &MetricField) -> f64 {
    let speeds: Vec<f64> = sol
        .values
        .iter()
        .zip(&sol.derivs)
        .map(|(c, v)| field.norm_at(c, v))
        .collect();
    trapezoid(&sol.times, &speeds)
}

pub(crate) fn trapezoid(times: &[f64], f: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(f.windows(2))
        .map(|(t, y)| 0.5 * (t[1] - t[0]) * (y[0] + y[1]))
        .sum()
}
