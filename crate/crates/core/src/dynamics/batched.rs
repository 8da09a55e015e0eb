//! The tempered generalized-leapfrog flow recorded in an autodiff graph.
//!
//! Rows of `z` and `v` are independent chains. The position gradient of the
//! kinetic energy is assembled in closed form from the metric's kernel sum,
//! so differentiating the flow only needs first-order reverse mode.

use super::{sqrt_beta, FlowConfig};
use crate::error::{Error, Result};
use crate::metric::{GraphMetric, GraphMetricEval};
use crate::numcore::{Graph, Var};
use crate::scalar::Scalar;

/// `dU/dz` for a batch of positions, recorded in the graph.
pub trait GraphPotential<T: Scalar> {
    fn grad(&mut self, g: &mut Graph<T>, z: Var) -> Result<Var>;
}

impl<T: Scalar, F> GraphPotential<T> for F
where
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    fn grad(&mut self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        self(g, z)
    }
}

/// End of a recorded flow.
#[derive(Clone, Debug)]
pub struct GraphFlowOutput {
    pub z: Var,
    pub v: Var,
    /// Metric quantities at the final position.
    pub at_end: GraphMetricEval,
    /// Rows where some fixed-point iteration failed to contract.
    pub unsettled: Vec<bool>,
}

/// Per-row max-abs difference between two `[B, d]` values.
fn row_gap<T: Scalar>(g: &Graph<T>, a: Var, b: Var) -> Vec<f64> {
    let (a, b) = (g.value(a), g.value(b));
    let d = a.cols();
    a.data()
        .chunks(d)
        .zip(b.data().chunks(d))
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(&p, &q)| (p - q).abs().to_f64_lossy())
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Marks rows whose last fixed-point update is no smaller than the first.
fn mark_unsettled<T: Scalar>(g: &Graph<T>, iterates: &[Var], flags: &mut [bool]) {
    if iterates.len() < 3 {
        return;
    }
    let first = row_gap(g, iterates[1], iterates[0]);
    let last = row_gap(g, iterates[iterates.len() - 1], iterates[iterates.len() - 2]);
    let top = g.value(iterates[iterates.len() - 1]);
    let scale: Vec<f64> = top
        .data()
        .chunks(top.cols())
        .map(|x| x.iter().map(|v| v.abs().to_f64_lossy()).fold(0.0, f64::max))
        .collect();
    for (r, f) in flags.iter_mut().enumerate() {
        if last[r] >= first[r] && last[r] > 1e-10 * (1.0 + scale[r]) {
            *f = true;
        }
    }
}

fn check_finite<T: Scalar>(g: &Graph<T>, vars: &[Var], step: usize) -> Result<()> {
    if vars.iter().all(|&v| g.value(v).is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration { step })
    }
}

/// Runs `cfg.steps` tempered steps from `(z0, v0)`; `at_start` must be the
/// metric evaluated at `z0`. Fixed points use exactly `cfg.fixed_point.iters`
/// iterations so the recorded graph has a fixed shape.
pub fn flow_graph<T: Scalar, P: GraphPotential<T>>(
    g: &mut Graph<T>,
    metric: &GraphMetric<T>,
    potential: &mut P,
    z0: Var,
    v0: Var,
    at_start: GraphMetricEval,
    cfg: &FlowConfig<T>,
) -> Result<GraphFlowOutput> {
    cfg.validate()?;
    let k_max = cfg.steps;
    let half = cfg.step_size / T::lit(2.0);
    let iters = cfg.fixed_point.iters;

    let mut z = z0;
    let mut v = v0;
    let mut here = at_start;
    let mut grad_u = potential.grad(g, z)?;
    let mut prev = sqrt_beta(cfg.beta0, 0, k_max);
    let mut unsettled = vec![false; g.shape(z0)[0]];
    for k in 1..=k_max {
        // implicit half kick at fixed z
        let mut vb = v;
        let mut seen = vec![v];
        for _ in 0..iters {
            let gk = metric.grad_z_kinetic(g, &here, vb)?;
            let gz = g.add(grad_u, gk)?;
            let step = g.scale(gz, half);
            vb = g.sub(v, step)?;
            seen.push(vb);
        }
        mark_unsettled(g, &seen, &mut unsettled);
        // implicit drift
        let drift = here.grad_v(g, vb)?;
        let mut zn = z;
        let mut seen = vec![z];
        for _ in 0..iters {
            let ginv = metric.inverse_metric(g, zn)?;
            let gv = crate::metric::graph_apply(g, ginv, vb)?;
            let s = g.add(drift, gv)?;
            let s = g.scale(s, half);
            zn = g.add(z, s)?;
            seen.push(zn);
        }
        mark_unsettled(g, &seen, &mut unsettled);
        // explicit half kick at the new position
        let there = metric.evaluate(g, zn)?;
        let grad_u_new = potential.grad(g, zn)?;
        let gk = metric.grad_z_kinetic(g, &there, vb)?;
        let gz = g.add(grad_u_new, gk)?;
        let step = g.scale(gz, half);
        let vn = g.sub(vb, step)?;

        let cur = sqrt_beta(cfg.beta0, k, k_max);
        v = g.scale(vn, prev / cur);
        prev = cur;
        z = zn;
        here = there;
        grad_u = grad_u_new;
        check_finite(g, &[z, v], k)?;
    }
    Ok(GraphFlowOutput {
        z,
        v,
        at_end: here,
        unsettled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{flow, FixedPoint, Hamiltonian, MetricSource, PhaseState, Quadratic};
    use crate::metric::MetricField;
    use crate::numcore::Tensor;

    fn field() -> MetricField<f64> {
        MetricField::new(
            2,
            vec![0.3, -0.2, -0.5, 0.4, 0.0, 0.9],
            vec![1.2, 0.0, 0.4, 0.7, 0.5, 0.0, -0.3, 2.0, 0.9, 0.0, 0.1, 0.4],
            0.8,
            0.05,
        )
        .unwrap()
    }

    #[test]
    fn matches_plain_flow_row_by_row() {
        let f = field();
        let cfg = FlowConfig::new(3, 0.05, 0.09, FixedPoint::fixed(3)).unwrap();
        let zs = [0.1, 0.2, -0.4, 0.3, 1.0, -1.0];
        let vs = [0.4, -0.3, 1.0, 0.2, -0.5, 0.5];

        let mut g = Graph::new();
        let gm = GraphMetric::from_field(&mut g, &f).unwrap();
        let z0 = g.constant(Tensor::new(&[3, 2], zs.to_vec()).unwrap());
        let v0 = g.constant(Tensor::new(&[3, 2], vs.to_vec()).unwrap());
        let start = gm.evaluate(&mut g, z0).unwrap();
        let mut pot = |g: &mut Graph<f64>, z: Var| Ok(g.scale(z, 0.7));
        let out = flow_graph(&mut g, &gm, &mut pot, z0, v0, start, &cfg).unwrap();

        let h = Hamiltonian::new(Quadratic::isotropic(2, 0.7), MetricSource::Field(&f), 2).unwrap();
        for b in 0..3 {
            let s = PhaseState::new(zs[2 * b..2 * b + 2].to_vec(), vs[2 * b..2 * b + 2].to_vec()).unwrap();
            let end = flow(&h, &s, &cfg).unwrap();
            let end = end.last();
            for i in 0..2 {
                assert!((g.value(out.z).data()[2 * b + i] - end.z[i]).abs() < 1e-12);
                assert!((g.value(out.v).data()[2 * b + i] - end.v[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_through_flow_matches_finite_differences() {
        let f = field();
        let cfg = FlowConfig::new(2, 0.1, 0.3, FixedPoint::fixed(3)).unwrap();
        let run = |z: &[f64], grad: bool| {
            let mut g = Graph::new();
            let gm = GraphMetric::from_field(&mut g, &f).unwrap();
            let z0 = g.param(Tensor::new(&[1, 2], z.to_vec()).unwrap());
            let v0 = g.constant(Tensor::new(&[1, 2], vec![0.3, -0.6]).unwrap());
            let start = gm.evaluate(&mut g, z0).unwrap();
            let mut pot = |g: &mut Graph<f64>, z: Var| {
                let c = g.square(z);
                g.add(z, c)
            };
            let out = flow_graph(&mut g, &gm, &mut pot, z0, v0, start, &cfg).unwrap();
            let a = g.sum(out.z);
            let b = g.square(out.v);
            let b = g.sum(b);
            let l = g.add(a, b).unwrap();
            let val = g.value(l).item();
            let grad = grad.then(|| g.backward(l).unwrap().wrt(z0));
            (val, grad)
        };
        let z = [0.15, -0.05];
        let an = run(&z, true).1.unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let (mut p, mut m) = (z, z);
            p[i] += h;
            m[i] -= h;
            let fd = (run(&p, false).0 - run(&m, false).0) / (2.0 * h);
            assert!((fd - an.data()[i]).abs() < 1e-6 * fd.abs().max(1.0), "{fd} vs {}", an.data()[i]);
        }
    }
}
