use super::PhaseState;
use crate::error::{Error, Result};
use crate::metric::MetricField;
use crate::numcore::linalg;
use crate::scalar::Scalar;

/// Potential energy `U(z) = -log p_target(z)` and its gradient.
pub trait Potential<T: Scalar> {
    fn value(&self, z: &[T]) -> T;
    fn grad(&self, z: &[T]) -> Vec<T>;
}

impl<T: Scalar, P: Potential<T> + ?Sized> Potential<T> for &P {
    fn value(&self, z: &[T]) -> T {
        (**self).value(z)
    }
    fn grad(&self, z: &[T]) -> Vec<T> {
        (**self).grad(z)
    }
}

/// `U(z) = k/2 |z - centre|^2`; `k = 0` is the free particle.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic<T> {
    pub stiffness: T,
    pub centre: Vec<T>,
}

impl<T: Scalar> Quadratic<T> {
    pub fn isotropic(dim: usize, stiffness: T) -> Self {
        Self {
            stiffness,
            centre: vec![T::zero(); dim],
        }
    }
}

impl<T: Scalar> Potential<T> for Quadratic<T> {
    fn value(&self, z: &[T]) -> T {
        let s: T = z.iter().zip(&self.centre).map(|(&a, &c)| (a - c) * (a - c)).sum();
        self.stiffness * s / T::lit(2.0)
    }

    fn grad(&self, z: &[T]) -> Vec<T> {
        z.iter().zip(&self.centre).map(|(&a, &c)| self.stiffness * (a - c)).collect()
    }
}

/// Potential from a pair of closures.
pub struct FnPotential<F, G> {
    pub value: F,
    pub grad: G,
}

impl<T, F, G> Potential<T> for FnPotential<F, G>
where
    T: Scalar,
    F: Fn(&[T]) -> T,
    G: Fn(&[T]) -> Vec<T>,
{
    fn value(&self, z: &[T]) -> T {
        (self.value)(z)
    }
    fn grad(&self, z: &[T]) -> Vec<T> {
        (self.grad)(z)
    }
}

/// Where the kinetic energy's metric comes from.
#[derive(Clone, Copy, Debug)]
pub enum MetricSource<'a, T> {
    Identity,
    Field(&'a MetricField<T>),
}

/// Riemannian Hamiltonian with potential `U` and metric `G`.
#[derive(Clone, Debug)]
pub struct Hamiltonian<'a, T, P> {
    pub potential: P,
    pub metric: MetricSource<'a, T>,
    dim: usize,
}

/// Position-dependent parts of `H` at one `z`, reused while only `v` changes.
#[derive(Clone, Debug)]
pub struct LocalGeometry<T> {
    pub inverse_metric: Vec<T>,
    pub logdet_inverse: T,
    /// `[d, d, d]` slabs `dG^{-1}/dz_i`.
    pub d_inverse_metric: Vec<T>,
    /// `tr(G dG^{-1}/dz_i)`.
    pub grad_logdet_inverse: Vec<T>,
    pub grad_potential: Vec<T>,
}

impl<T: Scalar> LocalGeometry<T> {
    fn dim(&self) -> usize {
        self.grad_potential.len()
    }

    /// `dH/dz = dU/dz + 1/2 (v^T dG^{-1}/dz_i v - tr(G dG^{-1}/dz_i))`.
    pub fn grad_z(&self, v: &[T]) -> Vec<T> {
        let d = self.dim();
        let half = T::lit(0.5);
        (0..d)
            .map(|i| {
                let slab = &self.d_inverse_metric[i * d * d..(i + 1) * d * d];
                self.grad_potential[i] + half * (linalg::quad_form(slab, v) - self.grad_logdet_inverse[i])
            })
            .collect()
    }

    /// `dH/dv = G^{-1} v`.
    pub fn grad_v(&self, v: &[T]) -> Vec<T> {
        linalg::matvec(&self.inverse_metric, v)
    }
}

impl<'a, T: Scalar, P: Potential<T>> Hamiltonian<'a, T, P> {
    pub fn new(potential: P, metric: MetricSource<'a, T>, dim: usize) -> Result<Self> {
        if let MetricSource::Field(f) = metric {
            if f.dim() != dim {
                return Err(Error::shape("hamiltonian metric", &[f.dim()], &[dim]));
            }
        }
        Ok(Self {
            potential,
            metric,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check(&self, x: &[T]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::shape("hamiltonian", &[x.len()], &[self.dim]));
        }
        Ok(())
    }

    /// `G^{-1}(z)`.
    pub fn inverse_metric(&self, z: &[T]) -> Result<Vec<T>> {
        self.check(z)?;
        match self.metric {
            MetricSource::Identity => Ok(identity(self.dim)),
            MetricSource::Field(f) => f.inverse_metric(z),
        }
    }

    pub fn local(&self, z: &[T]) -> Result<LocalGeometry<T>> {
        self.check(z)?;
        let d = self.dim;
        let grad_potential = self.potential.grad(z);
        match self.metric {
            MetricSource::Identity => Ok(LocalGeometry {
                inverse_metric: identity(d),
                logdet_inverse: T::zero(),
                d_inverse_metric: vec![T::zero(); d * d * d],
                grad_logdet_inverse: vec![T::zero(); d],
                grad_potential,
            }),
            MetricSource::Field(f) => {
                let eval = f.evaluate(z)?;
                let d_inverse_metric = f.grad_z_inverse_metric(z)?;
                let grad_logdet_inverse = (0..d)
                    .map(|i| linalg::trace_product(&eval.metric, &d_inverse_metric[i * d * d..(i + 1) * d * d], d))
                    .collect();
                Ok(LocalGeometry {
                    inverse_metric: eval.inverse_metric,
                    logdet_inverse: eval.logdet_inverse,
                    d_inverse_metric,
                    grad_logdet_inverse,
                    grad_potential,
                })
            }
        }
    }

    /// `U(z) + 1/2 [log((2 pi)^d det G(z)) + v^T G^{-1}(z) v]`.
    pub fn value(&self, s: &PhaseState<T>) -> Result<T> {
        self.check(&s.z)?;
        self.check(&s.v)?;
        let (ginv, logdet_inv) = match self.metric {
            MetricSource::Identity => (identity(self.dim), T::zero()),
            MetricSource::Field(f) => {
                let e = f.evaluate(&s.z)?;
                (e.inverse_metric, e.logdet_inverse)
            }
        };
        let d = T::from_usize(self.dim).unwrap();
        let kinetic = (d * T::TAU().ln() - logdet_inv + linalg::quad_form(&ginv, &s.v)) / T::lit(2.0);
        Ok(self.potential.value(&s.z) + kinetic)
    }

    pub fn grad_z(&self, z: &[T], v: &[T]) -> Result<Vec<T>> {
        self.check(v)?;
        Ok(self.local(z)?.grad_z(v))
    }

    pub fn grad_v(&self, z: &[T], v: &[T]) -> Result<Vec<T>> {
        self.check(v)?;
        Ok(linalg::matvec(&self.inverse_metric(z)?, v))
    }
}

fn identity<T: Scalar>(d: usize) -> Vec<T> {
    let mut m = vec![T::zero(); d * d];
    for i in 0..d {
        m[i * d + i] = T::one();
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field() -> MetricField<f64> {
        MetricField::new(
            2,
            vec![0.3, -0.2, -0.5, 0.4],
            vec![1.2, 0.0, 0.4, 0.7, 0.5, 0.0, -0.3, 2.0],
            0.8,
            0.05,
        )
        .unwrap()
    }

    #[test]
    fn free_particle_at_rest() {
        let h = Hamiltonian::new(Quadratic::isotropic(3, 0.0), MetricSource::Identity, 3).unwrap();
        let s = PhaseState::new(vec![0.4, -1.0, 2.0], vec![0.0; 3]).unwrap();
        let want = 1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((h.value(&s).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn constant_inverse_metric_closed_form() {
        let lambda = 0.25;
        let f = MetricField::<f64>::empty(2, 1.0, lambda).unwrap();
        let h = Hamiltonian::new(Quadratic::isotropic(2, 1.0), MetricSource::Field(&f), 2).unwrap();
        let s = PhaseState::new(vec![1.0, 2.0], vec![0.5, -1.0]).unwrap();
        // G = I / lambda
        let u = 0.5 * 5.0;
        let k = 0.5 * (2.0 * (2.0 * std::f64::consts::PI).ln() - 2.0 * lambda.ln() + lambda * 1.25);
        assert!((h.value(&s).unwrap() - (u + k)).abs() < 1e-13);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let f = field();
        let h = Hamiltonian::new(Quadratic::isotropic(2, 0.7), MetricSource::Field(&f), 2).unwrap();
        let z = [0.1, 0.2];
        let v = [0.6, -0.9];
        let gz = h.grad_z(&z, &v).unwrap();
        let gv = h.grad_v(&z, &v).unwrap();
        let eps = 1e-6;
        let at = |z: [f64; 2], v: [f64; 2]| h.value(&PhaseState::new(z.to_vec(), v.to_vec()).unwrap()).unwrap();
        for i in 0..2 {
            let (mut zp, mut zm) = (z, z);
            zp[i] += eps;
            zm[i] -= eps;
            let fd = (at(zp, v) - at(zm, v)) / (2.0 * eps);
            assert!((fd - gz[i]).abs() < 1e-7 * fd.abs().max(1.0));
            let (mut vp, mut vm) = (v, v);
            vp[i] += eps;
            vm[i] -= eps;
            let fd = (at(z, vp) - at(z, vm)) / (2.0 * eps);
            assert!((fd - gv[i]).abs() < 1e-7 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_mismatched_field() {
        let f = field();
        assert!(Hamiltonian::new(Quadratic::isotropic(3, 1.0), MetricSource::Field(&f), 3).is_err());
    }
}
