//! The per-sample log importance weight
//!
//! ```text
//! log p(x|z_K) + log N(v_K; 0, G(z_K)) + log N(z_K; 0, I)
//!   - log q(z_0|x) - log N(gamma; 0, G(z_0))
//! ```
//!
//! recorded in a graph, with `v_0 = gamma / sqrt(beta0)`. Its batch mean is
//! the training objective.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Mode, RhvaeModel};
use crate::dynamics::batched::{flow_graph, GraphPotential};
use crate::error::Result;
use crate::metric::{GraphMetric, MetricNetworkVars};
use crate::numcore::{DenseVars, Graph, Mlp, Tensor, Var};
use crate::scalar::Scalar;

/// Standard normal draws for the encoder (`eps`) and the initial velocity (`xi`).
#[derive(Clone, Debug, PartialEq)]
pub struct ElboNoise<T> {
    pub eps: Tensor<T>,
    pub xi: Tensor<T>,
}

impl<T: Scalar> ElboNoise<T> {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, rows: usize, dim: usize) -> Self {
        let mut normal = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
                .collect()
        };
        let eps = Tensor::new(&[rows, dim], normal(rows * dim)).expect("shape");
        let xi = Tensor::new(&[rows, dim], normal(rows * dim)).expect("shape");
        Self { eps, xi }
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            eps: Tensor::zeros(&[rows, dim]),
            xi: Tensor::zeros(&[rows, dim]),
        }
    }
}

/// Graph handles for every model parameter, in [`RhvaeModel::params`] order.
#[derive(Clone, Debug)]
pub(crate) struct ModelVars {
    trunk: Vec<DenseVars>,
    mean: DenseVars,
    log_var: DenseVars,
    decoder: Vec<DenseVars>,
    metric: Option<MetricNetworkVars>,
}

impl ModelVars {
    pub(crate) fn bind<T: Scalar>(g: &mut Graph<T>, m: &RhvaeModel<T>, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let trunk_vals: Vec<_> = m.encoder.trunk.layers.iter().map(|l| (leaf(&l.weight), leaf(&l.bias))).collect();
        let mean = DenseVars {
            weight: leaf(&m.encoder.mean.weight),
            bias: leaf(&m.encoder.mean.bias),
        };
        let log_var = DenseVars {
            weight: leaf(&m.encoder.log_var.weight),
            bias: leaf(&m.encoder.log_var.bias),
        };
        let trunk = trunk_vals.into_iter().map(|(weight, bias)| DenseVars { weight, bias }).collect();
        let decoder = m.decoder.bind(g, trainable);
        let metric = m.metric_net.as_ref().map(|n| n.bind(g, trainable));
        Self {
            trunk,
            mean,
            log_var,
            decoder,
            metric,
        }
    }

    pub(crate) fn all(&self) -> Vec<Var> {
        let mut v = Vec::new();
        let push = |v: &mut Vec<Var>, d: &DenseVars| {
            v.push(d.weight);
            v.push(d.bias);
        };
        for d in &self.trunk {
            push(&mut v, d);
        }
        push(&mut v, &self.mean);
        push(&mut v, &self.log_var);
        for d in &self.decoder {
            push(&mut v, d);
        }
        if let Some(m) = &self.metric {
            for d in &m.trunk {
                push(&mut v, d);
            }
            push(&mut v, &m.diag);
            push(&mut v, &m.lower);
        }
        v
    }
}

/// Where the metric comes from while building the objective.
#[derive(Clone, Copy, Debug)]
pub enum MetricInput<'a, T> {
    /// The frozen [`RhvaeModel::field`].
    Frozen,
    /// Batch centroids and factors from the live networks, plus constant
    /// entries for points outside the batch (`[M, d]` and `[M, d, d]`).
    Live { others: Option<(&'a Tensor<T>, &'a Tensor<T>)> },
}

/// Per-row nodes of the objective (all `[B]` unless noted).
#[derive(Clone, Debug)]
pub struct ElboTerms {
    pub log_lik: Var,
    pub log_prior: Var,
    pub log_q0: Var,
    /// `log N(v_K; 0, G(z_K)) - log N(gamma; 0, G(z_0))`; absent in VAE mode.
    pub velocity: Option<Var>,
    pub log_weight: Var,
    /// `[B, d]`
    pub mu: Var,
    /// `[B, d, d]` metric-network factors when the metric is live.
    pub factors: Option<Var>,
    /// `[B, d, d]` inverse metric at `z_0` (identity-like outside RHVAE).
    pub inverse_metric_start: Option<Var>,
    /// `[B, d]`
    pub z0: Var,
    pub z_end: Var,
    /// `[B, d]` initial (tempered) and final velocities; absent in VAE mode.
    pub v0: Option<Var>,
    pub v_end: Option<Var>,
    /// Rows whose implicit leapfrog iterations failed to contract.
    pub unsettled: Vec<bool>,
}

struct DecoderPotential<'a, T> {
    net: &'a Mlp<T>,
    vars: &'a [DenseVars],
    x: Var,
    seen: Vec<(Var, Var)>,
}

impl<T: Scalar> DecoderPotential<'_, T> {
    fn logits(&mut self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        if let Some(&(_, l)) = self.seen.iter().find(|(zz, _)| *zz == z) {
            return Ok(l);
        }
        let trace = self.net.forward_graph_trace(g, self.vars, z)?;
        let l = *trace.pre_acts.last().expect("decoder has layers");
        self.seen.push((z, l));
        Ok(l)
    }
}

impl<T: Scalar> GraphPotential<T> for DecoderPotential<'_, T> {
    /// `d/dz [-log p(x|z) - log N(z; 0, I)] = z + J^T (pi(z) - x)`.
    fn grad(&mut self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let trace = self.net.forward_graph_trace(g, self.vars, z)?;
        let l = *trace.pre_acts.last().expect("decoder has layers");
        self.seen.push((z, l));
        let cot = g.sub(trace.output, self.x)?;
        let vjp = self.net.input_vjp_graph(g, self.vars, &trace, cot)?;
        g.add(z, vjp)
    }
}

/// `sum_j x_j l_j - softplus(l_j)` per row: Bernoulli log-likelihood from logits.
fn bernoulli_log_lik<T: Scalar>(g: &mut Graph<T>, x: Var, logits: Var) -> Result<Var> {
    let xl = g.mul(x, logits)?;
    let sp = g.softplus(logits);
    let t = g.sub(xl, sp)?;
    g.sum_axis(t, 1, false)
}

/// `log N(z; 0, I)` per row.
fn std_normal_log_density<T: Scalar>(g: &mut Graph<T>, z: Var) -> Result<Var> {
    let d = g.shape(z)[1];
    let sq = g.square(z);
    let s = g.sum_axis(sq, 1, false)?;
    let s = g.scale(s, T::lit(-0.5));
    Ok(g.offset(s, -T::lit(0.5) * T::from_usize(d).unwrap() * T::TAU().ln()))
}

/// Records the objective for the rows of `x` (`[B, D]`).
pub(crate) fn build<T: Scalar>(
    g: &mut Graph<T>,
    model: &RhvaeModel<T>,
    vars: &ModelVars,
    x: Var,
    noise: &ElboNoise<T>,
    metric_input: MetricInput<'_, T>,
) -> Result<ElboTerms> {
    let cfg = &model.config;
    let d = cfg.latent_dim;

    // encoder and reparametrization
    let h = model.encoder.trunk.forward_graph(g, &vars.trunk, x)?;
    let mu = g.matmul(h, vars.mean.weight)?;
    let mu = g.add(mu, vars.mean.bias)?;
    let lv = g.matmul(h, vars.log_var.weight)?;
    let lv = g.add(lv, vars.log_var.bias)?;
    let half_lv = g.scale(lv, T::lit(0.5));
    let sd = g.exp(half_lv);
    let eps = g.constant(noise.eps.clone());
    let shift = g.mul(sd, eps)?;
    let z0 = g.add(mu, shift)?;

    // log q(z0|x) = -d/2 log 2 pi - 1/2 sum(log_var) - 1/2 |eps|^2
    let lv_sum = g.sum_axis(lv, 1, false)?;
    let e2 = g.constant(noise.eps.map(|e| e * e));
    let e2 = g.sum_axis(e2, 1, false)?;
    let q = g.add(lv_sum, e2)?;
    let q = g.scale(q, T::lit(-0.5));
    let log_q0 = g.offset(q, -T::lit(0.5) * T::from_usize(d).unwrap() * T::TAU().ln());

    let mut pot = DecoderPotential {
        net: &model.decoder,
        vars: &vars.decoder,
        x,
        seen: Vec::new(),
    };

    if cfg.mode == Mode::Vae {
        let l = pot.logits(g, z0)?;
        let log_lik = bernoulli_log_lik(g, x, l)?;
        let log_prior = std_normal_log_density(g, z0)?;
        let w = g.add(log_lik, log_prior)?;
        let log_weight = g.sub(w, log_q0)?;
        return Ok(ElboTerms {
            log_lik,
            log_prior,
            log_q0,
            velocity: None,
            log_weight,
            mu,
            factors: None,
            inverse_metric_start: None,
            z0,
            z_end: z0,
            v0: None,
            v_end: None,
            unsettled: vec![false; noise.eps.rows()],
        });
    }

    // metric
    let mut factors = None;
    let metric = match (cfg.mode, metric_input) {
        (Mode::Rhvae, MetricInput::Live { others }) => {
            let net = model.metric_net.as_ref().expect("rhvae model has a metric network");
            let mv = vars.metric.as_ref().expect("rhvae vars have a metric network");
            let l = net.forward_graph(g, mv, x)?;
            factors = Some(l);
            let (c, f) = match others {
                Some((oc, of)) if oc.rows() > 0 => {
                    let oc = g.constant(oc.clone());
                    let of = g.constant(of.clone());
                    (g.concat_rows(&[mu, oc])?, g.concat_rows(&[l, of])?)
                }
                _ => (mu, l),
            };
            GraphMetric::new(g, c, f, T::lit(cfg.temperature), T::lit(cfg.lambda))?
        }
        (Mode::Rhvae, MetricInput::Frozen) => GraphMetric::from_field(g, &model.field)?,
        _ => GraphMetric::constant(d, T::one()),
    };

    let start = metric.evaluate(g, z0)?;
    let xi = g.constant(noise.xi.clone());
    let gamma = start.sample_velocity(g, xi)?;
    let log_vel0 = start.log_velocity_density(g, gamma)?;

    let (v0, z_end, v_end, at_end, unsettled) = match cfg.flow::<T>()? {
        Some(flow) => {
            let v0 = g.scale(gamma, T::one() / flow.beta0.sqrt());
            let out = flow_graph(g, &metric, &mut pot, z0, v0, start, &flow)?;
            (v0, out.z, out.v, out.at_end, out.unsettled)
        }
        None => (gamma, z0, gamma, start, vec![false; g.shape(z0)[0]]),
    };
    let log_vel_end = at_end.log_velocity_density(g, v_end)?;
    let velocity = g.sub(log_vel_end, log_vel0)?;

    let l = pot.logits(g, z_end)?;
    let log_lik = bernoulli_log_lik(g, x, l)?;
    let log_prior = std_normal_log_density(g, z_end)?;
    let w = g.add(log_lik, log_prior)?;
    let w = g.add(w, velocity)?;
    let log_weight = g.sub(w, log_q0)?;
    Ok(ElboTerms {
        log_lik,
        log_prior,
        log_q0,
        velocity: Some(velocity),
        log_weight,
        mu,
        factors,
        inverse_metric_start: Some(start.inverse_metric),
        z0,
        z_end,
        v0: Some(v0),
        v_end: Some(v_end),
        unsettled,
    })
}

/// Evaluates the objective terms for `x` with the frozen metric and no
/// gradient tracking. Returns `(log_weight, log_lik)` per row.
pub fn elbo_terms<T: Scalar>(model: &RhvaeModel<T>, x: &Tensor<T>, noise: &ElboNoise<T>) -> Result<(Vec<T>, Vec<T>)> {
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, model, false);
    let xv = g.constant(x.clone());
    let t = build(&mut g, model, &vars, xv, noise, MetricInput::Frozen)?;
    Ok((g.value(t.log_weight).data().to_vec(), g.value(t.log_lik).data().to_vec()))
}

/// Batch-mean objective and its gradient for every parameter, in
/// [`RhvaeModel::params`] order, with the metric built from the live networks.
pub fn objective_gradients<T: Scalar>(
    model: &RhvaeModel<T>,
    x: &Tensor<T>,
    noise: &ElboNoise<T>,
) -> Result<(T, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, model, true);
    let xv = g.constant(x.clone());
    let t = build(&mut g, model, &vars, xv, noise, MetricInput::Live { others: None })?;
    let mean = g.mean(t.log_weight);
    let grads = g.backward(mean)?;
    let value = g.value(mean).item();
    Ok((value, vars.all().into_iter().map(|v| grads.wrt(v)).collect()))
}
