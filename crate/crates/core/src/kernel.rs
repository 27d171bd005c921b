//! Squared-exponential kernel `k(t1, t2) = exp(-(t1 - t2)^2 / (2 λ²))` on the
//! curve parameter, its input derivatives up to order (2, 2) and its
//! derivatives with respect to the squared length scale λ².
//!
//! Every entry has the form `P(δ, λ²) · k` with `δ = (t1 - t2) / λ²`. The
//! polynomials are tabulated for the canonical orders `m <= n`; the others
//! follow from `K(m, n) = (-1)^(m+n) K(n, m)` evaluated at the same δ.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Squared length scale λ² of the kernel.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct LengthScale(f64);

impl LengthScale {
    pub fn new(lambda_sq: f64) -> Result<Self> {
        if lambda_sq.is_finite() && lambda_sq > 0.0 {
            Ok(Self(lambda_sq))
        } else {
            Err(contract(format!(
                "length scale λ² must be finite and positive, got {lambda_sq}"
            )))
        }
    }

    #[inline]
    pub fn lambda_sq(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for LengthScale {
    type Error = crate::Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LengthScale> for f64 {
    fn from(ls: LengthScale) -> f64 {
        ls.0
    }
}

/// Derivative orders `(m, n)` with respect to the first and second kernel argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DerivOrder {
    m: u8,
    n: u8,
}

impl DerivOrder {
    pub const VALUE: DerivOrder = DerivOrder { m: 0, n: 0 };
    pub const SECOND_SECOND: DerivOrder = DerivOrder { m: 2, n: 2 };

    pub fn new(m: u8, n: u8) -> Result<Self> {
        if m <= 2 && n <= 2 {
            Ok(Self { m, n })
        } else {
            Err(contract(format!(
                "derivative order ({m}, {n}) exceeds (2, 2)"
            )))
        }
    }

    #[inline]
    pub fn m(self) -> u8 {
        self.m
    }

    #[inline]
    pub fn n(self) -> u8 {
        self.n
    }

    pub fn swapped(self) -> Self {
        Self {
            m: self.n,
            n: self.m,
        }
    }

    /// All nine supported orders.
    pub fn all() -> impl Iterator<Item = DerivOrder> {
        (0..3u8).flat_map(|m| (0..3u8).map(move |n| DerivOrder { m, n }))
    }
}

#[inline]
fn base(t1: f64, t2: f64, s: f64) -> (f64, f64) {
    let d = t1 - t2;
    (d / s, (-0.5 * d * d / s).exp())
}

/// Sign and canonical (m <= n) order.
#[inline]
fn canonical(order: DerivOrder) -> (f64, u8, u8) {
    let (m, n) = (order.m, order.n);
    if m <= n {
        (1.0, m, n)
    } else {
        let sign = if (m + n) % 2 == 0 { 1.0 } else { -1.0 };
        (sign, n, m)
    }
}

/// Polynomial factor of the kernel entry itself.
fn poly0(m: u8, n: u8, d: f64, s: f64) -> f64 {
    let d2 = d * d;
    match (m, n) {
        (0, 0) => 1.0,
        (0, 1) => d,
        (0, 2) => d2 - 1.0 / s,
        (1, 1) => 1.0 / s - d2,
        (1, 2) => -d2 * d + 3.0 * d / s,
        (2, 2) => d2 * d2 - 6.0 * d2 / s + 3.0 / (s * s),
        _ => unreachable!("non-canonical order"),
    }
}

/// Polynomial factor of ∂/∂λ².
fn poly1(m: u8, n: u8, d: f64, s: f64) -> f64 {
    let d2 = d * d;
    let d4 = d2 * d2;
    match (m, n) {
        (0, 0) => 0.5 * d2,
        (0, 1) => 0.5 * d2 * d - d / s,
        (0, 2) => 0.5 * d4 - 2.5 * d2 / s + 1.0 / (s * s),
        (1, 1) => -(0.5 * d4 - 2.5 * d2 / s + 1.0 / (s * s)),
        (1, 2) => -0.5 * d4 * d + 4.5 * d2 * d / s - 6.0 * d / (s * s),
        (2, 2) => {
            // (-4δ⁴/λ² + 18δ²/λ⁴ - 6/λ⁶) + K22·δ²/2
            let own = -4.0 * d4 / s + 18.0 * d2 / (s * s) - 6.0 / (s * s * s);
            own + poly0(2, 2, d, s) * 0.5 * d2
        }
        _ => unreachable!("non-canonical order"),
    }
}

/// Polynomial factor of ∂²/∂(λ²)².
fn poly2(m: u8, n: u8, d: f64, s: f64) -> f64 {
    let d2 = d * d;
    let d4 = d2 * d2;
    let (s2, s3) = (s * s, s * s * s);
    match (m, n) {
        (0, 0) => 0.25 * d4 - d2 / s,
        (0, 1) => 0.25 * d4 * d - 2.0 * d2 * d / s + 2.0 * d / s2,
        (0, 2) => 0.25 * d4 * d2 - 3.25 * d4 / s + 8.0 * d2 / s2 - 2.0 / s3,
        (1, 1) => -(0.25 * d4 * d2 - 3.25 * d4 / s + 8.0 * d2 / s2 - 2.0 / s3),
        (1, 2) => -0.25 * d4 * d2 * d + 4.75 * d4 * d / s - 21.0 * d2 * d / s2 + 18.0 * d / s3,
        (2, 2) => {
            let own = -3.0 * d4 * d2 / s + 35.0 * d4 / s2 - 78.0 * d2 / s3 + 18.0 / (s2 * s2);
            own + 0.5 * d2 * poly1(2, 2, d, s)
        }
        _ => unreachable!("non-canonical order"),
    }
}

/// `∂^m ∂^n k(t1, t2) / ∂t1^m ∂t2^n`.
pub fn k_eval(t1: f64, t2: f64, ls: LengthScale, order: DerivOrder) -> f64 {
    let s = ls.0;
    let (d, k) = base(t1, t2, s);
    let (sign, m, n) = canonical(order);
    sign * poly0(m, n, d, s) * k
}

/// `∂/∂λ²` of [`k_eval`] at the given order.
pub fn k_dlambda2(t1: f64, t2: f64, ls: LengthScale, order: DerivOrder) -> f64 {
    let s = ls.0;
    let (d, k) = base(t1, t2, s);
    let (sign, m, n) = canonical(order);
    sign * poly1(m, n, d, s) * k
}

/// `∂²/∂(λ²)²` of the (2, 2) entry.
pub fn k_d2lambda2(t1: f64, t2: f64, ls: LengthScale) -> f64 {
    k_d2lambda2_at(t1, t2, ls, DerivOrder::SECOND_SECOND)
}

/// `∂²/∂(λ²)²` of [`k_eval`] at any order.
pub fn k_d2lambda2_at(t1: f64, t2: f64, ls: LengthScale, order: DerivOrder) -> f64 {
    let s = ls.0;
    let (d, k) = base(t1, t2, s);
    let (sign, m, n) = canonical(order);
    sign * poly2(m, n, d, s) * k
}
