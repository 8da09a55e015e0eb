//! Hamiltonian dynamics on the latent space.
//!
//! [`generalized_leapfrog_step`] integrates the position-dependent Hamiltonian
//! `H(z, v) = U(z) + 1/2 [log((2 pi)^d det G(z)) + v^T G^{-1}(z) v]`;
//! [`euclidean_leapfrog`] is the explicit scheme for `U(z) + |v|^2 / 2`.
//! [`batched`] runs the same flow inside an autodiff graph for training.

pub mod batched;
mod hamiltonian;
mod integrators;

pub use hamiltonian::{FnPotential, Hamiltonian, LocalGeometry, MetricSource, Potential, Quadratic};
pub use integrators::{
    euclidean_leapfrog, euclidean_leapfrog_step, flow, generalized_leapfrog_step, FlowTrace,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Position `z` and velocity `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseState<T> {
    pub z: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> PhaseState<T> {
    pub fn new(z: Vec<T>, v: Vec<T>) -> Result<Self> {
        if z.len() != v.len() {
            return Err(Error::shape("phase state", &[z.len()], &[v.len()]));
        }
        Ok(Self { z, v })
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }

    pub fn is_finite(&self) -> bool {
        self.z.iter().chain(&self.v).all(|x| x.is_finite())
    }

    /// Same position, velocity negated.
    pub fn flipped(&self) -> Self {
        Self {
            z: self.z.clone(),
            v: self.v.iter().map(|&x| -x).collect(),
        }
    }
}

/// How the implicit half-steps of the generalized leapfrog are solved.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    /// Iteration count, or the cap when `tolerance` is set.
    pub iters: usize,
    /// Stop early once the max-abs change drops below this.
    pub tolerance: Option<f64>,
}

impl FixedPoint {
    /// A fixed number of iterations (what training uses).
    pub const fn fixed(iters: usize) -> Self {
        Self {
            iters,
            tolerance: None,
        }
    }

    /// Iterate to `tol`, at most `cap` times.
    pub const fn converged(tol: f64, cap: usize) -> Self {
        Self {
            iters: cap,
            tolerance: Some(tol),
        }
    }
}

impl Default for FixedPoint {
    fn default() -> Self {
        Self::fixed(3)
    }
}

/// Flow hyperparameters: `K` steps of size `eps`, tempered from `beta0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig<T> {
    pub steps: usize,
    pub step_size: T,
    pub beta0: T,
    pub fixed_point: FixedPoint,
}

impl<T: Scalar> FlowConfig<T> {
    pub fn new(steps: usize, step_size: T, beta0: T, fixed_point: FixedPoint) -> Result<Self> {
        let cfg = Self {
            steps,
            step_size,
            beta0,
            fixed_point,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("flow needs at least one leapfrog step".into()));
        }
        if !(self.step_size > T::zero()) || !self.step_size.is_finite() {
            return Err(Error::Config(format!("step size must be > 0, got {}", self.step_size)));
        }
        if !(self.beta0 > T::zero() && self.beta0 <= T::one()) {
            return Err(Error::Config(format!("beta0 must lie in (0, 1], got {}", self.beta0)));
        }
        if self.fixed_point.iters == 0 {
            return Err(Error::Config("fixed-point iteration count must be >= 1".into()));
        }
        Ok(())
    }
}

/// `sqrt(beta_k) = 1 / ((1 - 1/sqrt(beta0)) k^2/K^2 + 1/sqrt(beta0))`.
pub fn sqrt_beta<T: Scalar>(beta0: T, k: usize, steps: usize) -> T {
    let inv0 = T::one() / beta0.sqrt();
    let frac = T::from_usize(k * k).unwrap() / T::from_usize(steps * steps).unwrap();
    T::one() / ((T::one() - inv0) * frac + inv0)
}

/// Temperatures `beta_0, ..., beta_K`.
pub fn tempering_schedule<T: Scalar>(beta0: T, steps: usize) -> Vec<T> {
    (0..=steps)
        .map(|k| {
            let s = sqrt_beta(beta0, k, steps);
            s * s
        })
        .collect()
}

/// `prod_k (beta_{k-1} / beta_k)^{d/2}` over a schedule.
pub fn tempering_factor<T: Scalar>(schedule: &[T], dim: usize) -> T {
    let half_d = T::from_usize(dim).unwrap() / T::lit(2.0);
    schedule
        .windows(2)
        .map(|w| (w[0] / w[1]).powf(half_d))
        .fold(T::one(), |a, b| a * b)
}
