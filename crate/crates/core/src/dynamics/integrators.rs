use super::{sqrt_beta, FixedPoint, FlowConfig, Hamiltonian, PhaseState, Potential};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn max_change<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs().to_f64_lossy())
        .fold(0.0, f64::max)
}

/// Repeats `x <- f(x)` from `x0` as configured by `fp`.
fn solve<T: Scalar>(x0: Vec<T>, fp: &FixedPoint, mut f: impl FnMut(&[T]) -> Result<Vec<T>>) -> Result<Vec<T>> {
    let mut x = x0;
    for _ in 0..fp.iters {
        let next = f(&x)?;
        let done = fp.tolerance.is_some_and(|tol| max_change(&next, &x) < tol);
        x = next;
        if done {
            break;
        }
    }
    Ok(x)
}

/// One step of the generalized leapfrog:
///
/// ```text
/// v' = v - eps/2 dH/dz(z, v')                      (implicit)
/// z' = z + eps/2 [dH/dv(z, v') + dH/dv(z', v')]    (implicit)
/// v''= v' - eps/2 dH/dz(z', v')
/// ```
pub fn generalized_leapfrog_step<T: Scalar, P: Potential<T>>(
    h: &Hamiltonian<'_, T, P>,
    s: &PhaseState<T>,
    eps: T,
    fp: &FixedPoint,
) -> Result<PhaseState<T>> {
    let half = eps / T::lit(2.0);
    let here = h.local(&s.z)?;
    let v_half = solve(s.v.clone(), fp, |vb| {
        Ok(s.v
            .iter()
            .zip(here.grad_z(vb))
            .map(|(&v, g)| v - half * g)
            .collect())
    })?;
    let drift = here.grad_v(&v_half);
    let z_new = solve(s.z.clone(), fp, |zb| {
        let g = h.grad_v(zb, &v_half)?;
        Ok(s.z
            .iter()
            .zip(drift.iter().zip(g))
            .map(|(&z, (&a, b))| z + half * (a + b))
            .collect())
    })?;
    let there = h.local(&z_new)?;
    let v_new = v_half
        .iter()
        .zip(there.grad_z(&v_half))
        .map(|(&v, g)| v - half * g)
        .collect();
    let out = PhaseState { z: z_new, v: v_new };
    if !out.is_finite() {
        return Err(Error::Integration { step: 0 });
    }
    Ok(out)
}

/// States and temperatures visited by [`flow`].
#[derive(Clone, Debug)]
pub struct FlowTrace<T> {
    pub states: Vec<PhaseState<T>>,
    pub betas: Vec<T>,
}

impl<T> FlowTrace<T> {
    pub fn last(&self) -> &PhaseState<T> {
        self.states.last().expect("flow trace holds the start state")
    }
}

/// `K` tempered generalized-leapfrog steps from `s0`. After step `k` the
/// velocity is scaled by `sqrt(beta_{k-1} / beta_k)`.
pub fn flow<T: Scalar, P: Potential<T>>(
    h: &Hamiltonian<'_, T, P>,
    s0: &PhaseState<T>,
    cfg: &FlowConfig<T>,
) -> Result<FlowTrace<T>> {
    cfg.validate()?;
    let k_max = cfg.steps;
    let mut states = Vec::with_capacity(k_max + 1);
    let mut betas = Vec::with_capacity(k_max + 1);
    states.push(s0.clone());
    let mut prev = sqrt_beta(cfg.beta0, 0, k_max);
    betas.push(prev * prev);
    let mut s = s0.clone();
    for k in 1..=k_max {
        s = generalized_leapfrog_step(h, &s, cfg.step_size, &cfg.fixed_point).map_err(|e| match e {
            Error::Integration { .. } => Error::Integration { step: k },
            other => other,
        })?;
        let cur = sqrt_beta(cfg.beta0, k, k_max);
        let alpha = prev / cur;
        for v in &mut s.v {
            *v *= alpha;
        }
        prev = cur;
        betas.push(cur * cur);
        states.push(s.clone());
    }
    Ok(FlowTrace { states, betas })
}

/// Explicit half-kick / drift / half-kick with step `gamma`.
pub fn euclidean_leapfrog_step<T: Scalar, P: Potential<T> + ?Sized>(
    u: &P,
    s: &PhaseState<T>,
    gamma: T,
) -> Result<PhaseState<T>> {
    euclidean_leapfrog(u, s, gamma, 1)
}

/// `steps` explicit leapfrog steps, sharing the gradient between adjacent half-kicks.
pub fn euclidean_leapfrog<T: Scalar, P: Potential<T> + ?Sized>(
    u: &P,
    s: &PhaseState<T>,
    gamma: T,
    steps: usize,
) -> Result<PhaseState<T>> {
    if !(gamma > T::zero()) {
        return Err(Error::Config(format!("leapfrog step must be > 0, got {gamma}")));
    }
    let half = gamma / T::lit(2.0);
    let mut z = s.z.clone();
    let mut v = s.v.clone();
    let mut g = u.grad(&z);
    for step in 1..=steps {
        for (vi, gi) in v.iter_mut().zip(&g) {
            *vi -= half * *gi;
        }
        for (zi, vi) in z.iter_mut().zip(&v) {
            *zi += gamma * *vi;
        }
        g = u.grad(&z);
        for (vi, gi) in v.iter_mut().zip(&g) {
            *vi -= half * *gi;
        }
        if !z.iter().chain(&v).all(|x| x.is_finite()) {
            return Err(Error::Integration { step });
        }
    }
    Ok(PhaseState { z, v })
}
