//! Learned Riemannian metric over the latent space.
//!
//! The inverse metric is a sum of Gaussian kernels centred on the encoded
//! training points, each weighted by a learned SPD matrix, plus a floor:
//!
//! ```text
//! G^{-1}(z) = sum_i L_i L_i^T exp(-|z - c_i|^2 / T^2) + lambda I
//! ```
//!
//! Everything that needs `G` or a determinant goes through the Cholesky
//! factor of `G^{-1}`.

mod graph;
mod network;
mod volume;

pub use graph::{GraphMetric, GraphMetricEval};
pub(crate) use graph::apply as graph_apply;
pub use network::{MetricNetwork, MetricNetworkVars};
pub use volume::{BoundingBox, VolumeMap};

use crate::error::{Error, Result};
use crate::numcore::linalg;
use crate::scalar::Scalar;

/// Kernel exponents below this are treated as exactly zero.
const EXP_CUTOFF: f64 = -745.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricField<T> {
    dim: usize,
    /// `[N, d]` row-major.
    centroids: Vec<T>,
    /// `[N, d, d]` lower-triangular factors.
    factors: Vec<T>,
    /// `[N, d, d]` cached `L_i L_i^T`.
    outer: Vec<T>,
    temperature: T,
    lambda: T,
}

/// `G^{-1}(z)`, its Cholesky factor, `G(z)` and `log det G^{-1}(z)` at one point.
#[derive(Clone, Debug)]
pub struct MetricEval<T> {
    pub inverse_metric: Vec<T>,
    pub cholesky: Vec<T>,
    pub metric: Vec<T>,
    pub logdet_inverse: T,
}

impl<T: Scalar> MetricField<T> {
    pub fn new(dim: usize, centroids: Vec<T>, factors: Vec<T>, temperature: T, lambda: T) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        if !(temperature > T::zero()) || !temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
        }
        if !(lambda > T::zero()) || !lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be > 0, got {lambda}")));
        }
        if !centroids.len().is_multiple_of(dim) {
            return Err(Error::shape("centroids", &[centroids.len()], &[dim]));
        }
        let n = centroids.len() / dim;
        if factors.len() != n * dim * dim {
            return Err(Error::shape("factors", &[factors.len()], &[n, dim, dim]));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numerical("non-finite centroid".into()));
        }
        for (i, l) in factors.chunks(dim * dim).enumerate() {
            for r in 0..dim {
                for c in 0..dim {
                    let x = l[r * dim + c];
                    let ok = match r.cmp(&c) {
                        std::cmp::Ordering::Less => x == T::zero(),
                        std::cmp::Ordering::Equal => x > T::zero() && x.is_finite(),
                        std::cmp::Ordering::Greater => x.is_finite(),
                    };
                    if !ok {
                        return Err(Error::Numerical(format!(
                            "factor {i} is not lower-triangular with positive diagonal at ({r},{c})"
                        )));
                    }
                }
            }
        }
        let outer = outer_products(&factors, dim);
        Ok(Self {
            dim,
            centroids,
            factors,
            outer,
            temperature,
            lambda,
        })
    }

    /// Field without kernels: `G^{-1} = lambda I` everywhere.
    pub fn empty(dim: usize, temperature: T, lambda: T) -> Result<Self> {
        Self::new(dim, Vec::new(), Vec::new(), temperature, lambda)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn centroids(&self) -> &[T] {
        &self.centroids
    }

    pub fn centroid(&self, i: usize) -> &[T] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn factors(&self) -> &[T] {
        &self.factors
    }

    /// `L_i L_i^T` for every kernel, `[N, d, d]`.
    pub fn outer_products(&self) -> &[T] {
        &self.outer
    }

    /// Largest centroid norm (0 for an empty field).
    pub fn max_centroid_norm(&self) -> T {
        (0..self.len())
            .map(|i| norm(self.centroid(i)))
            .fold(T::zero(), T::max)
    }

    fn check_dim(&self, z: &[T]) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::shape("latent point", &[z.len()], &[self.dim]));
        }
        Ok(())
    }

    /// Kernel weights `exp(-|z - c_i|^2 / T^2)`.
    pub fn kernel_weights(&self, z: &[T]) -> Vec<T> {
        let t2 = self.temperature * self.temperature;
        let cutoff = T::lit(EXP_CUTOFF);
        (0..self.len())
            .map(|i| {
                let e = -sq_dist(z, self.centroid(i)) / t2;
                if e < cutoff {
                    T::zero()
                } else {
                    e.exp()
                }
            })
            .collect()
    }

    pub fn inverse_metric(&self, z: &[T]) -> Result<Vec<T>> {
        self.check_dim(z)?;
        let d = self.dim;
        let mut out = vec![T::zero(); d * d];
        for (w, m) in self.kernel_weights(z).iter().zip(self.outer.chunks(d * d)) {
            if *w == T::zero() {
                continue;
            }
            for (o, &x) in out.iter_mut().zip(m) {
                *o += *w * x;
            }
        }
        for i in 0..d {
            out[i * d + i] += self.lambda;
        }
        Ok(out)
    }

    pub fn evaluate(&self, z: &[T]) -> Result<MetricEval<T>> {
        let ginv = self.inverse_metric(z)?;
        let chol = linalg::cholesky(&ginv, self.dim).map_err(|e| {
            Error::Numerical(format!("inverse metric lost positive definiteness: {e}"))
        })?;
        let logdet_inverse = linalg::cholesky_logdet(&chol, self.dim);
        let metric = linalg::spd_inverse_from_factor(&chol, self.dim);
        Ok(MetricEval {
            inverse_metric: ginv,
            cholesky: chol,
            metric,
            logdet_inverse,
        })
    }

    /// `G(z) = (G^{-1}(z))^{-1}`.
    pub fn metric(&self, z: &[T]) -> Result<Vec<T>> {
        Ok(self.evaluate(z)?.metric)
    }

    /// `log det G^{-1}(z)`.
    pub fn logdet_inverse(&self, z: &[T]) -> Result<T> {
        Ok(self.evaluate(z)?.logdet_inverse)
    }

    /// `log sqrt(det G(z)) = -1/2 log det G^{-1}(z)`.
    pub fn log_volume(&self, z: &[T]) -> Result<T> {
        Ok(-T::lit(0.5) * self.logdet_inverse(z)?)
    }

    /// `dG^{-1}/dz_i` for each `i`, laid out as `[d (i), d, d]`.
    pub fn grad_z_inverse_metric(&self, z: &[T]) -> Result<Vec<T>> {
        self.check_dim(z)?;
        let d = self.dim;
        let mut out = vec![T::zero(); d * d * d];
        let scale = -T::lit(2.0) / (self.temperature * self.temperature);
        for (j, w) in self.kernel_weights(z).into_iter().enumerate() {
            if w == T::zero() {
                continue;
            }
            let c = self.centroid(j);
            let m = &self.outer[j * d * d..(j + 1) * d * d];
            for i in 0..d {
                let coef = scale * (z[i] - c[i]) * w;
                let slab = &mut out[i * d * d..(i + 1) * d * d];
                for (o, &x) in slab.iter_mut().zip(m) {
                    *o += coef * x;
                }
            }
        }
        Ok(out)
    }

    /// Gradient of `log det G^{-1}(z)`: `tr(G dG^{-1}/dz_i)`.
    pub fn grad_z_logdet_inverse(&self, z: &[T]) -> Result<Vec<T>> {
        let eval = self.evaluate(z)?;
        self.grad_z_logdet_inverse_with(z, &eval)
    }

    pub(crate) fn grad_z_logdet_inverse_with(&self, z: &[T], eval: &MetricEval<T>) -> Result<Vec<T>> {
        let d = self.dim;
        let dginv = self.grad_z_inverse_metric(z)?;
        Ok((0..d)
            .map(|i| linalg::trace_product(&eval.metric, &dginv[i * d * d..(i + 1) * d * d], d))
            .collect())
    }

    /// Samples `log sqrt(det G)` on a regular grid (2-D latent spaces only).
    pub fn volume_map(&self, bbox: BoundingBox, resolution: usize) -> Result<VolumeMap> {
        VolumeMap::compute(self, bbox, resolution)
    }
}

fn outer_products<T: Scalar>(factors: &[T], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(factors.len());
    for l in factors.chunks(d * d) {
        for r in 0..d {
            for c in 0..d {
                let mut s = T::zero();
                for k in 0..=r.min(c) {
                    s += l[r * d + k] * l[c * d + k];
                }
                out.push(s);
            }
        }
    }
    out
}

pub(crate) fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

pub(crate) fn norm<T: Scalar>(a: &[T]) -> T {
    a.iter().map(|&x| x * x).sum::<T>().sqrt()
}
