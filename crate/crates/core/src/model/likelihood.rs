use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::elbo::{elbo_terms, ElboNoise};
use super::RhvaeModel;
use crate::dynamics::{flow, FlowConfig, FnPotential, Hamiltonian, MetricSource, PhaseState};
use crate::error::{Error, Result};
use crate::numcore::{linalg, Tensor};
use crate::scalar::Scalar;

/// `log(mean(exp(w)))` without overflow.
pub fn log_mean_exp(w: &[f64]) -> f64 {
    if w.is_empty() {
        return f64::NEG_INFINITY;
    }
    let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + (w.iter().map(|&x| (x - m).exp()).sum::<f64>() / w.len() as f64).ln()
}

/// Diagonal Gaussian `N(mean, diag(exp(log_var)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian<T> {
    pub mean: Vec<T>,
    pub log_var: Vec<T>,
}

impl<T: Scalar> DiagGaussian<T> {
    pub fn sample(&self, noise: &[T]) -> Vec<T> {
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(noise)
            .map(|((&m, &lv), &e)| m + (lv / T::lit(2.0)).exp() * e)
            .collect()
    }

    pub fn log_density(&self, z: &[T]) -> T {
        let half = T::lit(0.5);
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(z)
            .map(|((&m, &lv), &x)| -half * (T::TAU().ln() + lv + (x - m) * (x - m) / lv.exp()))
            .sum()
    }
}

/// `log N(v; 0, G)` from the Cholesky factor of `G^{-1}` and `G^{-1}` itself.
fn log_velocity_density<T: Scalar>(ginv: &[T], logdet_inv: T, v: &[T]) -> T {
    let d = T::from_usize(v.len()).unwrap();
    (logdet_inv - linalg::quad_form(ginv, v) - d * T::TAU().ln()) / T::lit(2.0)
}

/// Solves `L^T x = b` for lower-triangular `L`.
fn solve_upper_transposed<T: Scalar>(l: &[T], b: &[T]) -> Vec<T> {
    let n = b.len();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// One importance weight `log p_hat(x)` for a single datum, computed without
/// autodiff. `log_lik`/`grad_log_lik` give `log p(x|z)` and its gradient; the
/// prior is `N(0, I)`. With `flow = None` this is the plain VAE weight.
#[allow(clippy::too_many_arguments)]
pub fn log_importance_weight<T, L, G>(
    log_lik: L,
    grad_log_lik: G,
    q: &DiagGaussian<T>,
    metric: MetricSource<'_, T>,
    flow_cfg: Option<&FlowConfig<T>>,
    eps: &[T],
    xi: &[T],
) -> Result<T>
where
    T: Scalar,
    L: Fn(&[T]) -> T,
    G: Fn(&[T]) -> Vec<T>,
{
    let d = q.mean.len();
    let half = T::lit(0.5);
    let log_prior = |z: &[T]| -> T {
        -half * (T::from_usize(d).unwrap() * T::TAU().ln() + z.iter().map(|&a| a * a).sum::<T>())
    };
    let z0 = q.sample(eps);
    let log_q0 = q.log_density(&z0);
    let Some(cfg) = flow_cfg else {
        return Ok(log_lik(&z0) + log_prior(&z0) - log_q0);
    };

    let geometry = |z: &[T]| -> Result<(Vec<T>, Vec<T>, T)> {
        match metric {
            MetricSource::Identity => {
                let mut eye = vec![T::zero(); d * d];
                for i in 0..d {
                    eye[i * d + i] = T::one();
                }
                Ok((eye.clone(), eye, T::zero()))
            }
            MetricSource::Field(f) => {
                let e = f.evaluate(z)?;
                Ok((e.inverse_metric, e.cholesky, e.logdet_inverse))
            }
        }
    };
    let (ginv0, chol0, ld0) = geometry(&z0)?;
    let gamma = solve_upper_transposed(&chol0, xi);
    let log_vel0 = log_velocity_density(&ginv0, ld0, &gamma);

    let potential = FnPotential {
        value: |z: &[T]| -log_lik(z) - log_prior(z),
        grad: |z: &[T]| {
            grad_log_lik(z)
                .into_iter()
                .zip(z)
                .map(|(g, &a)| a - g)
                .collect::<Vec<T>>()
        },
    };
    let h = Hamiltonian::new(potential, metric, d)?;
    let scale = T::one() / cfg.beta0.sqrt();
    let s0 = PhaseState::new(z0, gamma.iter().map(|&g| g * scale).collect())?;
    let end = flow(&h, &s0, cfg)?;
    let end = end.last();
    let (ginv_k, _, ld_k) = geometry(&end.z)?;
    let log_vel_k = log_velocity_density(&ginv_k, ld_k, &end.v);
    Ok(log_lik(&end.z) + log_prior(&end.z) + log_vel_k - log_q0 - log_vel0)
}

/// Importance-sampled `log p(x)` averaged over a test set, repeated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodEstimate {
    pub mean: f64,
    pub sd: f64,
    pub repeats: Vec<f64>,
}

/// Rows per graph when batching importance samples.
const MAX_ROWS: usize = 2048;

/// Log-mean-exp of `n_importance` weights per datum, averaged over the rows
/// of `x`; repeated `repeats` times with seeds `seed, seed + 1, ...`.
pub fn estimate_log_likelihood<T: Scalar>(
    model: &RhvaeModel<T>,
    x: &Tensor<T>,
    n_importance: usize,
    repeats: usize,
    seed: u64,
) -> Result<LikelihoodEstimate> {
    if n_importance == 0 || repeats == 0 {
        return Err(Error::Config("n_importance and repeats must be >= 1".into()));
    }
    if x.rank() != 2 || x.cols() != model.input_dim() {
        return Err(Error::shape("likelihood input", x.shape(), &[0, model.input_dim()]));
    }
    let d = model.latent_dim();
    let per_chunk = (MAX_ROWS / n_importance).max(1);
    let mut out = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
        let mut total = 0.0;
        let mut start = 0;
        while start < x.rows() {
            let end = (start + per_chunk).min(x.rows());
            let idx: Vec<usize> = (start..end).flat_map(|i| std::iter::repeat_n(i, n_importance)).collect();
            let xb = x.select_rows(&idx);
            let noise = ElboNoise::draw(&mut rng, idx.len(), d);
            let (w, _) = elbo_terms(model, &xb, &noise)?;
            for chunk in w.chunks(n_importance) {
                let wf: Vec<f64> = chunk.iter().map(|v| v.to_f64_lossy()).collect();
                total += log_mean_exp(&wf);
            }
            start = end;
        }
        out.push(total / x.rows() as f64);
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    let sd = if out.len() > 1 {
        (out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (out.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(LikelihoodEstimate {
        mean,
        sd,
        repeats: out,
    })
}
