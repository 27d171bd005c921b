//! Gaussian-process inference for vector-valued curves `c: R -> R^D` with the
//! separable prior `Cov(c_i(t1), c_j(t2)) = V_ij k(t1, t2)`, conditioned on
//! noisy linear observations of values, first or second derivatives.
//!
//! Stacked vectors and Gram matrices are time-major: functional index outer,
//! output dimension inner. Block `(p, q)` of the Gram matrix is therefore
//! `V · k(t_p, t_q; order_p, order_q) + δ_pq Λ_p`.

use std::hash::{DefaultHasher, Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::kernel::{k_d2lambda2_at, k_dlambda2, k_eval, DerivOrder, LengthScale};
use crate::linalg::{self, factor_with_jitter, JitterPolicy, JitterScale, JitteredCholesky};

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Point evaluation of the curve or one of its first two derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Functional {
    pub t: f64,
    pub order: u8,
}

impl Functional {
    pub fn new(t: f64, order: u8) -> Result<Self> {
        if !t.is_finite() {
            return Err(contract(format!(
                "functional location must be finite, got {t}"
            )));
        }
        if order > 2 {
            return Err(contract(format!(
                "functional order must be 0, 1 or 2, got {order}"
            )));
        }
        Ok(Self { t, order })
    }

    pub fn value(t: f64) -> Self {
        Self { t, order: 0 }
    }

    pub fn first(t: f64) -> Self {
        Self { t, order: 1 }
    }

    pub fn second(t: f64) -> Self {
        Self { t, order: 2 }
    }

    #[inline]
    fn cov(self, other: Functional, ls: LengthScale) -> f64 {
        k_eval(
            self.t,
            other.t,
            ls,
            DerivOrder::new(self.order, other.order).expect("validated order"),
        )
    }
}

/// Affine prior mean `μ(t) = offset + slope · t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFn {
    pub offset: DVector<f64>,
    pub slope: DVector<f64>,
}

impl MeanFn {
    pub fn linear(offset: DVector<f64>, slope: DVector<f64>) -> Result<Self> {
        if offset.len() != slope.len() {
            return Err(contract("mean offset and slope dimensions differ"));
        }
        Ok(Self { offset, slope })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            offset: DVector::zeros(dim),
            slope: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn eval(&self, f: Functional) -> DVector<f64> {
        match f.order {
            0 => &self.offset + &self.slope * f.t,
            1 => self.slope.clone(),
            _ => DVector::zeros(self.dim()),
        }
    }
}

/// Output covariance `V` of the separable prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DMatrix<f64>", into = "DMatrix<f64>")]
pub struct OutputCov(DMatrix<f64>);

impl OutputCov {
    pub fn new(v: DMatrix<f64>) -> Result<Self> {
        if !v.is_square() || v.nrows() == 0 {
            return Err(contract(
                "output covariance must be a non-empty square matrix",
            ));
        }
        if !linalg::is_psd(&v, 1e-10) {
            return Err(contract(
                "output covariance must be finite, symmetric and positive semidefinite",
            ));
        }
        Ok(Self(linalg::symmetrize(&v)))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

impl TryFrom<DMatrix<f64>> for OutputCov {
    type Error = Error;
    fn try_from(v: DMatrix<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<OutputCov> for DMatrix<f64> {
    fn from(v: OutputCov) -> Self {
        v.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub functional: Functional,
    pub value: DVector<f64>,
    /// Gaussian noise covariance of this observation (`D × D`).
    pub noise: DMatrix<f64>,
}

/// Observations with block-diagonal noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    dim: usize,
    items: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            items: Vec::new(),
        }
    }

    pub fn push(&mut self, obs: Observation) -> Result<()> {
        let d = self.dim;
        if obs.value.len() != d || obs.noise.nrows() != d || obs.noise.ncols() != d {
            return Err(contract(format!(
                "observation dimensions do not match D = {d}"
            )));
        }
        if !obs
            .value
            .iter()
            .chain(obs.noise.iter())
            .all(|v| v.is_finite())
        {
            return Err(contract("observation contains non-finite entries"));
        }
        let scale = obs.noise.amax().max(f64::MIN_POSITIVE);
        if (&obs.noise - obs.noise.transpose()).amax() > 1e-9 * scale {
            return Err(contract("observation noise must be symmetric"));
        }
        if obs.noise.diagonal().iter().any(|v| *v < 0.0) {
            return Err(contract(
                "observation noise must have a nonnegative diagonal",
            ));
        }
        self.items.push(obs);
        Ok(())
    }

    pub fn with(mut self, obs: Observation) -> Result<Self> {
        self.push(obs)?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Observation> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Observation> {
        self.items.get(i)
    }

    pub fn functionals(&self) -> impl Iterator<Item = Functional> + '_ {
        self.items.iter().map(|o| o.functional)
    }

    /// Stacked `values - prior mean`.
    pub fn residual(&self, mean_fn: &MeanFn) -> DVector<f64> {
        let d = self.dim;
        let mut r = DVector::zeros(self.items.len() * d);
        for (p, o) in self.items.iter().enumerate() {
            r.rows_mut(p * d, d)
                .copy_from(&(&o.value - mean_fn.eval(o.functional)));
        }
        r
    }
}

/// Scalar kernel matrix between two functional lists.
fn kernel_matrix(a: &[Functional], b: &[Functional], ls: LengthScale) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| a[i].cov(b[j], ls))
}

/// `Γ = K ⊗ V + blockdiag(Λ_p)`, without jitter.
pub fn assemble_gram(obs: &ObservationSet, ls: LengthScale, out_cov: &OutputCov) -> DMatrix<f64> {
    let fs: Vec<Functional> = obs.functionals().collect();
    let mut g = kernel_matrix(&fs, &fs, ls).kronecker(out_cov.matrix());
    let d = obs.dim();
    for (p, o) in obs.iter().enumerate() {
        let mut block = g.view_mut((p * d, p * d), (d, d));
        block += &o.noise;
    }
    g
}

fn gram_derivative(
    obs: &ObservationSet,
    ls: LengthScale,
    out_cov: &OutputCov,
    second: bool,
) -> DMatrix<f64> {
    let fs: Vec<Functional> = obs.functionals().collect();
    let k = DMatrix::from_fn(fs.len(), fs.len(), |i, j| {
        let o = DerivOrder::new(fs[i].order, fs[j].order).expect("validated order");
        if second {
            k_d2lambda2_at(fs[i].t, fs[j].t, ls, o)
        } else {
            k_dlambda2(fs[i].t, fs[j].t, ls, o)
        }
    });
    k.kronecker(out_cov.matrix())
}

/// Joint Gaussian posterior over a curve and its derivatives.
#[derive(Debug, Clone)]
pub struct CurveBelief {
    mean_fn: MeanFn,
    ls: LengthScale,
    out_cov: OutputCov,
    obs: ObservationSet,
    jitter: JitterPolicy,
    factor: Option<JitteredCholesky>,
    weights: DVector<f64>,
}

impl CurveBelief {
    /// Assembles and factorizes the Gram matrix, escalating diagonal jitter on failure.
    pub fn build(
        mean_fn: MeanFn,
        ls: LengthScale,
        out_cov: OutputCov,
        obs: ObservationSet,
    ) -> Result<Self> {
        Self::build_with(mean_fn, ls, out_cov, obs, JitterPolicy::default())
    }

    pub fn build_with(
        mean_fn: MeanFn,
        ls: LengthScale,
        out_cov: OutputCov,
        obs: ObservationSet,
        jitter: JitterPolicy,
    ) -> Result<Self> {
        let d = out_cov.dim();
        if mean_fn.dim() != d || obs.dim() != d {
            return Err(contract(format!(
                "dimension mismatch: mean {}, output covariance {d}, observations {}",
                mean_fn.dim(),
                obs.dim()
            )));
        }
        if obs.is_empty() {
            return Ok(Self {
                mean_fn,
                ls,
                out_cov,
                obs,
                jitter,
                factor: None,
                weights: DVector::zeros(0),
            });
        }
        let gram = assemble_gram(&obs, ls, &out_cov);
        let factor = factor_with_jitter(&gram, &jitter, JitterScale::Diagonal)?;
        let weights = factor.solve(&obs.residual(&mean_fn));
        Ok(Self {
            mean_fn,
            ls,
            out_cov,
            obs,
            jitter,
            factor: Some(factor),
            weights,
        })
    }

    /// Same Gram factorization, new observation values.
    pub fn with_values(&self, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != self.obs.len() {
            return Err(contract("value count does not match the observation count"));
        }
        let mut obs = self.obs.clone();
        for (o, v) in obs.items.iter_mut().zip(values) {
            if v.len() != self.dim() || !v.iter().all(|x| x.is_finite()) {
                return Err(contract(
                    "replacement value has wrong dimension or is not finite",
                ));
            }
            o.value = v;
        }
        let weights = match &self.factor {
            Some(f) => f.solve(&obs.residual(&self.mean_fn)),
            None => DVector::zeros(0),
        };
        Ok(Self {
            obs,
            weights,
            ..self.clone()
        })
    }

    /// Rebuilds the belief with one more observation.
    pub fn appended(&self, obs: Observation) -> Result<Self> {
        let set = self.obs.clone().with(obs)?;
        Self::build_with(
            self.mean_fn.clone(),
            self.ls,
            self.out_cov.clone(),
            set,
            self.jitter,
        )
    }

    pub fn dim(&self) -> usize {
        self.out_cov.dim()
    }

    pub fn mean_fn(&self) -> &MeanFn {
        &self.mean_fn
    }

    pub fn length_scale(&self) -> LengthScale {
        self.ls
    }

    pub fn out_cov(&self) -> &OutputCov {
        &self.out_cov
    }

    pub fn observations(&self) -> &ObservationSet {
        &self.obs
    }

    pub fn jitter_policy(&self) -> JitterPolicy {
        self.jitter
    }

    /// `Γ⁻¹ (values − prior means)`.
    pub fn resid_weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn factor(&self) -> Option<&JitteredCholesky> {
        self.factor.as_ref()
    }

    /// Un-jittered Gram matrix.
    pub fn gram(&self) -> DMatrix<f64> {
        assemble_gram(&self.obs, self.ls, &self.out_cov)
    }

    /// Fingerprint of the factorized Gram matrix (factor entries and jitter).
    pub fn gram_digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        if let Some(f) = &self.factor {
            let l = f.chol.l_dirty();
            for j in 0..l.ncols() {
                for i in j..l.nrows() {
                    l[(i, j)].to_bits().hash(&mut h);
                }
            }
            for a in f.added.iter() {
                a.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    fn functionals(&self) -> Vec<Functional> {
        self.obs.functionals().collect()
    }

    /// `(K(queries, obs) ⊗ V)`, shape `(nq·D) × (Q·D)`.
    fn cross(&self, queries: &[Functional]) -> DMatrix<f64> {
        kernel_matrix(queries, &self.functionals(), self.ls).kronecker(self.out_cov.matrix())
    }

    pub fn posterior_mean(&self, q: Functional) -> DVector<f64> {
        let prior = self.mean_fn.eval(q);
        if self.obs.is_empty() {
            return prior;
        }
        let d = self.dim();
        let mut acc = DVector::zeros(d);
        for (p, f) in self.obs.functionals().enumerate() {
            acc += self.weights.rows(p * d, d) * q.cov(f, self.ls);
        }
        prior + self.out_cov.matrix() * acc
    }

    /// Stacked posterior means, time-major.
    pub fn posterior_means(&self, queries: &[Functional]) -> DVector<f64> {
        let d = self.dim();
        let mut out = DVector::zeros(queries.len() * d);
        for (a, q) in queries.iter().enumerate() {
            out.rows_mut(a * d, d).copy_from(&self.posterior_mean(*q));
        }
        out
    }

    pub fn posterior_cov(&self, q1: Functional, q2: Functional) -> Result<DMatrix<f64>> {
        if q1 == q2 {
            let (_, cov) = self.posterior_joint(&[q1])?;
            return Ok(cov);
        }
        let v = self.out_cov.matrix();
        let prior = v * q1.cov(q2, self.ls);
        let Some(f) = &self.factor else {
            return Ok(prior);
        };
        let a1 = f.solve_lower(&self.cross(&[q1]).transpose());
        let a2 = f.solve_lower(&self.cross(&[q2]).transpose());
        Ok(prior - a1.transpose() * a2)
    }

    /// Joint posterior mean and covariance over a list of functionals.
    ///
    /// Variances that come out negative by less than `1e-10` of their prior
    /// value are roundoff and are set to zero; anything larger is an error.
    pub fn posterior_joint(&self, queries: &[Functional]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mean = self.posterior_means(queries);
        let prior = kernel_matrix(queries, queries, self.ls).kronecker(self.out_cov.matrix());
        let mut cov = match &self.factor {
            Some(f) => {
                let a = f.solve_lower(&self.cross(queries).transpose());
                &prior - a.transpose() * a
            }
            None => prior.clone(),
        };
        cov = linalg::symmetrize(&cov);
        for i in 0..cov.nrows() {
            let v = cov[(i, i)];
            if v < 0.0 {
                let tol = 1e-10 * prior[(i, i)].abs().max(f64::MIN_POSITIVE);
                if v < -tol {
                    return Err(Error::IllConditioned {
                        size: self.obs.len() * self.dim(),
                        jitter: self.factor.as_ref().map_or(0.0, |f| f.level),
                        condition: linalg::condition_estimate(&self.gram()),
                    });
                }
                cov[(i, i)] = 0.0;
            }
        }
        Ok((mean, cov))
    }

    /// `count` joint draws over `queries`; each draw is a `D × queries.len()`
    /// matrix whose column `j` is the sampled value of functional `j`.
    /// Draw `k` uses the `k`-th block of standard normals from `seed`.
    pub fn joint_sample(
        &self,
        queries: &[Functional],
        count: usize,
        seed: u64,
    ) -> Result<Vec<DMatrix<f64>>> {
        if count == 0 {
            return Err(contract("sample count must be at least 1"));
        }
        let (mean, cov) = self.posterior_joint(queries)?;
        // Near-deterministic posteriors carry cancellation error far above the
        // jitter scale; fall back to a square root of the PSD projection.
        let l = match factor_with_jitter(&cov, &self.jitter, JitterScale::MeanDiagonal) {
            Ok(f) => f.l(),
            Err(_) => linalg::psd_sqrt(&cov),
        };
        let n = mean.len();
        let d = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut rng)));
            let x = &mean + &l * z;
            out.push(DMatrix::from_column_slice(d, queries.len(), x.as_slice()));
        }
        Ok(out)
    }

    /// `log p(values | λ², V)` of the current observations.
    pub fn log_marginal(&self) -> f64 {
        let Some(f) = &self.factor else { return 0.0 };
        let r = self.obs.residual(&self.mean_fn);
        -0.5 * (r.dot(&self.weights) + f.log_det() + r.len() as f64 * LOG_2PI)
    }

    /// First and second derivative of `-2 log p(values | λ²)` with respect
    /// to λ², holding observation values and noise fixed.
    pub fn evidence_derivatives(&self) -> (f64, f64) {
        let Some(f) = &self.factor else {
            return (0.0, 0.0);
        };
        let n = self.weights.len();
        let g_inv = f.chol.solve(&DMatrix::identity(n, n));
        let dg = gram_derivative(&self.obs, self.ls, &self.out_cov, false);
        let d2g = gram_derivative(&self.obs, self.ls, &self.out_cov, true);
        let alpha = &self.weights;
        let g_inv_dg = &g_inv * &dg;
        let dg_alpha = &dg * alpha;
        let grad = -alpha.dot(&dg_alpha) + g_inv_dg.trace();
        let hess = 2.0 * dg_alpha.dot(&(&g_inv * &dg_alpha))
            - (&g_inv_dg * &g_inv_dg).trace()
            - alpha.dot(&(&d2g * alpha))
            + (&g_inv * &d2g).trace();
        (grad, hess)
    }
}

/// `log p(values | λ², V)` for an observation set under the given prior.
pub fn log_marginal(
    obs: &ObservationSet,
    mean_fn: &MeanFn,
    ls: LengthScale,
    out_cov: &OutputCov,
) -> Result<f64> {
    if obs.is_empty() {
        return Err(contract("log marginal needs at least one observation"));
    }
    Ok(CurveBelief::build(mean_fn.clone(), ls, out_cov.clone(), obs.clone())?.log_marginal())
}
