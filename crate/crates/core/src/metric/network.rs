use rand::Rng;

use crate::error::Result;
use crate::numcore::{Activation, Dense, DenseVars, Graph, Mlp, Tensor, Var};
use crate::scalar::Scalar;

/// Maps an input to the lower-triangular factor `L` of its metric kernel.
///
/// A shared trunk feeds two linear heads: `d` diagonal entries (exponentiated
/// so they stay positive) and `d(d-1)/2` strictly-lower entries, filled row
/// by row (`(1,0), (2,0), (2,1), ...`).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricNetwork<T> {
    pub trunk: Mlp<T>,
    pub diag: Dense<T>,
    pub lower: Dense<T>,
    dim: usize,
}

#[derive(Clone, Debug)]
pub struct MetricNetworkVars {
    pub trunk: Vec<DenseVars>,
    pub diag: DenseVars,
    pub lower: DenseVars,
}

impl<T: Scalar> MetricNetwork<T> {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: usize, latent_dim: usize, rng: &mut R) -> Result<Self> {
        let trunk = Mlp::new(&[input_dim, hidden], &[Activation::Relu], rng)?;
        let diag = Dense::init(hidden, latent_dim, Activation::Linear, rng);
        let lower = Dense::init(hidden, lower_count(latent_dim), Activation::Linear, rng);
        Ok(Self {
            trunk,
            diag,
            lower,
            dim: latent_dim,
        })
    }

    pub fn from_parts(trunk: Mlp<T>, diag: Dense<T>, lower: Dense<T>) -> Result<Self> {
        let dim = diag.output_dim();
        if lower.output_dim() != lower_count(dim) || diag.input_dim() != trunk.output_dim() {
            return Err(crate::Error::shape(
                "metric heads",
                diag.weight.shape(),
                lower.weight.shape(),
            ));
        }
        Ok(Self {
            trunk,
            diag,
            lower,
            dim,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.trunk.params();
        p.extend([&self.diag.weight, &self.diag.bias, &self.lower.weight, &self.lower.bias]);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.trunk.params_mut();
        p.extend([
            &mut self.diag.weight,
            &mut self.diag.bias,
            &mut self.lower.weight,
            &mut self.lower.bias,
        ]);
        p
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut n = self.trunk.param_names(&format!("{prefix}.trunk"));
        for h in ["diag", "lower"] {
            n.push(format!("{prefix}.{h}.weight"));
            n.push(format!("{prefix}.{h}.bias"));
        }
        n
    }

    /// Factors for a `[B, D]` batch, returned as `[B, d, d]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.trunk.forward(x)?;
        let diag = h.matmul(&self.diag.weight)?.add(&self.diag.bias)?.map(T::exp);
        let lower = h.matmul(&self.lower.weight)?.add(&self.lower.bias)?;
        let d = self.dim;
        let b = h.rows();
        let mut out = vec![T::zero(); b * d * d];
        for r in 0..b {
            let l = &mut out[r * d * d..(r + 1) * d * d];
            for i in 0..d {
                l[i * d + i] = diag.row(r)[i];
            }
            for (k, (i, j)) in lower_indices(d).enumerate() {
                l[i * d + j] = lower.row(r)[k];
            }
        }
        Tensor::new(&[b, d, d], out)
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> MetricNetworkVars {
        let trunk = self.trunk.bind(g, trainable);
        let mut head = |l: &Dense<T>| {
            if trainable {
                DenseVars {
                    weight: g.param(l.weight.clone()),
                    bias: g.param(l.bias.clone()),
                }
            } else {
                DenseVars {
                    weight: g.constant(l.weight.clone()),
                    bias: g.constant(l.bias.clone()),
                }
            }
        };
        let diag = head(&self.diag);
        let lower = head(&self.lower);
        MetricNetworkVars { trunk, diag, lower }
    }

    /// Recorded version of [`MetricNetwork::forward`]; output `[B, d, d]`.
    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &MetricNetworkVars, x: Var) -> Result<Var> {
        let d = self.dim;
        let h = self.trunk.forward_graph(g, &vars.trunk, x)?;
        let b = g.shape(h)[0];
        let dl = g.matmul(h, vars.diag.weight)?;
        let dl = g.add(dl, vars.diag.bias)?;
        let dl = g.exp(dl);
        let pd = g.constant(placement_diag(d));
        let mut flat = g.matmul(dl, pd)?;
        if d > 1 {
            let lo = g.matmul(h, vars.lower.weight)?;
            let lo = g.add(lo, vars.lower.bias)?;
            let pl = g.constant(placement_lower(d));
            let lo = g.matmul(lo, pl)?;
            flat = g.add(flat, lo)?;
        }
        g.reshape(flat, &[b, d, d])
    }
}

pub(crate) fn lower_count(d: usize) -> usize {
    d * (d.saturating_sub(1)) / 2
}

fn lower_indices(d: usize) -> impl Iterator<Item = (usize, usize)> {
    (1..d).flat_map(|i| (0..i).map(move |j| (i, j)))
}

fn placement_diag<T: Scalar>(d: usize) -> Tensor<T> {
    let mut p = Tensor::zeros(&[d, d * d]);
    for i in 0..d {
        p.data_mut()[i * d * d + i * d + i] = T::one();
    }
    p
}

fn placement_lower<T: Scalar>(d: usize) -> Tensor<T> {
    let m = lower_count(d);
    let mut p = Tensor::zeros(&[m, d * d]);
    for (k, (i, j)) in lower_indices(d).enumerate() {
        p.data_mut()[k * d * d + i * d + j] = T::one();
    }
    p
}
