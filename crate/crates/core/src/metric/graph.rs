//! Batched evaluation of the metric inside an autodiff [`Graph`].
//!
//! Points are rows of a `[B, d]` node. Kernel parameters are nodes too, so
//! gradients reach the centroids and factors (and from there the encoder and
//! metric network) during training.

use super::MetricField;
use crate::error::Result;
use crate::numcore::{Graph, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
struct Kernels {
    /// `[N, d]`
    centroids: Var,
    /// `[N, d*d]` flattened `L_i L_i^T`.
    outer: Var,
}

/// Inverse metric `sum_i L_i L_i^T exp(-|z - c_i|^2 / T^2) + lambda I` as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct GraphMetric<T> {
    dim: usize,
    kernels: Option<Kernels>,
    temperature: T,
    lambda: T,
}

/// Position-dependent quantities at a batch of points.
#[derive(Clone, Copy, Debug)]
pub struct GraphMetricEval {
    /// `[B, N]` kernel weights (absent for a kernel-free metric).
    weights: Option<Var>,
    /// `[B, d, d]`
    pub inverse_metric: Var,
    /// `[B, d, d]` lower Cholesky factor of the inverse metric.
    pub cholesky: Var,
    /// `[B, d, d]` inverse of `cholesky`.
    pub cholesky_inv: Var,
    /// `[B, d, d]`
    pub metric: Var,
    /// `[B]`
    pub logdet_inverse: Var,
    /// `[B, N]` values `tr(G(z_b) L_j L_j^T)`.
    trace_gm: Option<Var>,
    /// `[B, d]` the evaluation points.
    pub z: Var,
}

impl<T: Scalar> GraphMetric<T> {
    /// Metric with kernels centred at `centroids` (`[N, d]`) with factors `[N, d, d]`.
    pub fn new(g: &mut Graph<T>, centroids: Var, factors: Var, temperature: T, lambda: T) -> Result<Self> {
        let n = g.shape(centroids)[0];
        let d = g.shape(centroids)[1];
        let outer = g.bmm_t(factors, factors, false, true)?;
        let outer = g.reshape(outer, &[n, d * d])?;
        Ok(Self {
            dim: d,
            kernels: Some(Kernels { centroids, outer }),
            temperature,
            lambda,
        })
    }

    /// The constant metric `G^{-1} = lambda I`; `lambda = 1` gives the Euclidean case.
    pub fn constant(dim: usize, lambda: T) -> Self {
        Self {
            dim,
            kernels: None,
            temperature: T::one(),
            lambda,
        }
    }

    /// Frozen copy of `field` with every parameter recorded as a constant.
    pub fn from_field(g: &mut Graph<T>, field: &MetricField<T>) -> Result<Self> {
        if field.is_empty() {
            return Ok(Self {
                dim: field.dim(),
                kernels: None,
                temperature: field.temperature(),
                lambda: field.lambda(),
            });
        }
        let d = field.dim();
        let n = field.len();
        let centroids = g.constant(Tensor::new(&[n, d], field.centroids().to_vec())?);
        let outer = g.constant(Tensor::new(&[n, d * d], field.outer_products().to_vec())?);
        Ok(Self {
            dim: d,
            kernels: Some(Kernels { centroids, outer }),
            temperature: field.temperature(),
            lambda: field.lambda(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn weights(&self, g: &mut Graph<T>, k: &Kernels, z: Var) -> Result<Var> {
        let zz = g.square(z);
        let zz = g.sum_axis(zz, 1, true)?;
        let cc = g.square(k.centroids);
        let cc = g.sum_axis(cc, 1, false)?;
        let zc = g.matmul_t(z, k.centroids, false, true)?;
        let zc = g.scale(zc, T::lit(-2.0));
        let sq = g.add(zz, cc)?;
        let sq = g.add(sq, zc)?;
        let t2 = self.temperature * self.temperature;
        let e = g.scale(sq, -T::one() / t2);
        Ok(g.exp(e))
    }

    fn floor(&self, g: &mut Graph<T>) -> Var {
        let d = self.dim;
        let mut f = Tensor::zeros(&[1, d, d]);
        for i in 0..d {
            f.data_mut()[i * d + i] = self.lambda;
        }
        g.constant(f)
    }

    fn inverse_with_weights(&self, g: &mut Graph<T>, z: Var) -> Result<(Var, Option<Var>)> {
        let b = g.shape(z)[0];
        let d = self.dim;
        let floor = self.floor(g);
        match &self.kernels {
            None => {
                let zero = g.constant(Tensor::zeros(&[b, d, d]));
                Ok((g.add(zero, floor)?, None))
            }
            Some(k) => {
                let w = self.weights(g, k, z)?;
                let s = g.matmul(w, k.outer)?;
                let s = g.reshape(s, &[b, d, d])?;
                Ok((g.add(s, floor)?, Some(w)))
            }
        }
    }

    /// `G^{-1}` at each row of `z`, shape `[B, d, d]`.
    pub fn inverse_metric(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        Ok(self.inverse_with_weights(g, z)?.0)
    }

    /// Everything the flow and the density terms need at `z`.
    pub fn evaluate(&self, g: &mut Graph<T>, z: Var) -> Result<GraphMetricEval> {
        let b = g.shape(z)[0];
        let d = self.dim;
        let (ginv, weights) = self.inverse_with_weights(g, z)?;
        let chol = g.cholesky(ginv)?;
        let chol_inv = g.inverse(chol)?;
        let metric = g.bmm_t(chol_inv, chol_inv, true, false)?;

        let mut pick = Tensor::zeros(&[d * d, d]);
        for i in 0..d {
            pick.data_mut()[(i * d + i) * d + i] = T::one();
        }
        let pick = g.constant(pick);
        let flat = g.reshape(chol, &[b, d * d])?;
        let diag = g.matmul(flat, pick)?;
        let logs = g.ln(diag);
        let logdet = g.sum_axis(logs, 1, false)?;
        let logdet = g.scale(logdet, T::lit(2.0));

        let trace_gm = match &self.kernels {
            None => None,
            Some(k) => {
                let gflat = g.reshape(metric, &[b, d * d])?;
                Some(g.matmul_t(gflat, k.outer, false, true)?)
            }
        };
        Ok(GraphMetricEval {
            weights,
            inverse_metric: ginv,
            cholesky: chol,
            cholesky_inv: chol_inv,
            metric,
            logdet_inverse: logdet,
            trace_gm,
            z,
        })
    }

    /// `dH_kin/dz` for `H_kin = 1/2 [log((2 pi)^d det G) + v^T G^{-1} v]`, shape `[B, d]`.
    ///
    /// Per row this is `(-2/T^2) sum_j w_j / 2 (v^T M_j v - tr(G M_j)) (z - c_j)`.
    pub fn grad_z_kinetic(&self, g: &mut Graph<T>, at: &GraphMetricEval, v: Var) -> Result<Var> {
        let (k, w, trgm) = match (&self.kernels, at.weights, at.trace_gm) {
            (Some(k), Some(w), Some(t)) => (k, w, t),
            _ => {
                let shape = g.shape(at.z).to_vec();
                return Ok(g.constant(Tensor::zeros(&shape)));
            }
        };
        let b = g.shape(v)[0];
        let d = self.dim;
        let vc = g.reshape(v, &[b, d, 1])?;
        let vv = g.bmm_t(vc, vc, false, true)?;
        let vv = g.reshape(vv, &[b, d * d])?;
        let vmv = g.matmul_t(vv, k.outer, false, true)?;
        let diff = g.sub(vmv, trgm)?;
        let coeff = g.mul(w, diff)?;
        let s = g.sum_axis(coeff, 1, true)?;
        let zs = g.mul(at.z, s)?;
        let cc = g.matmul(coeff, k.centroids)?;
        let r = g.sub(zs, cc)?;
        // the 1/2 of the kinetic energy folds into -2/T^2
        let t2 = self.temperature * self.temperature;
        Ok(g.scale(r, -T::one() / t2))
    }
}

/// `G^{-1} v` row by row: `[B, d, d] x [B, d] -> [B, d]`.
pub(crate) fn apply<T: Scalar>(g: &mut Graph<T>, m: Var, v: Var) -> Result<Var> {
    let b = g.shape(v)[0];
    let d = g.shape(v)[1];
    let vc = g.reshape(v, &[b, d, 1])?;
    let out = g.bmm_t(m, vc, false, false)?;
    g.reshape(out, &[b, d])
}

/// `v^T A v` row by row, shape `[B]`.
pub(crate) fn quad<T: Scalar>(g: &mut Graph<T>, m: Var, v: Var) -> Result<Var> {
    let mv = apply(g, m, v)?;
    let p = g.mul(v, mv)?;
    g.sum_axis(p, 1, false)
}

impl GraphMetricEval {
    /// `dH/dv = G^{-1}(z) v`.
    pub fn grad_v<T: Scalar>(&self, g: &mut Graph<T>, v: Var) -> Result<Var> {
        apply(g, self.inverse_metric, v)
    }

    /// `v^T G^{-1}(z) v`, shape `[B]`.
    pub fn quad_inverse<T: Scalar>(&self, g: &mut Graph<T>, v: Var) -> Result<Var> {
        quad(g, self.inverse_metric, v)
    }

    /// Maps standard normal rows `eps` to draws from `N(0, G(z))`.
    pub fn sample_velocity<T: Scalar>(&self, g: &mut Graph<T>, eps: Var) -> Result<Var> {
        let b = g.shape(eps)[0];
        let d = g.shape(eps)[1];
        let ec = g.reshape(eps, &[b, d, 1])?;
        let out = g.bmm_t(self.cholesky_inv, ec, true, false)?;
        g.reshape(out, &[b, d])
    }

    /// `log N(v; 0, G(z))` per row, shape `[B]`.
    pub fn log_velocity_density<T: Scalar>(&self, g: &mut Graph<T>, v: Var) -> Result<Var> {
        let d = g.shape(v)[1];
        let q = self.quad_inverse(g, v)?;
        let s = g.sub(self.logdet_inverse, q)?;
        let s = g.scale(s, T::lit(0.5));
        let c = -T::lit(0.5) * T::from_usize(d).unwrap() * T::TAU().ln();
        Ok(g.offset(s, c))
    }
}
