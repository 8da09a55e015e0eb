use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::graph::{sigmoid, Graph, Var};
use crate::numcore::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
    Sigmoid,
}

/// Fully connected layer `y = act(x W + b)` with `W` stored as `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
}

impl<T: Scalar> Dense<T> {
    /// Fan-in scaled uniform init, `U(-1/sqrt(in), 1/sqrt(in))` for weights and biases.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::lit(rng.random_range(-bound..bound)))
                .collect()
        };
        Self {
            weight: Tensor::new(&[input, output], draw(input * output)).expect("shape"),
            bias: Tensor::new(&[output], draw(output)).expect("shape"),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Multi-layer perceptron.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
}

/// Graph handles of one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Scalar> Mlp<T> {
    /// Builds a network through `dims[0] -> dims[1] -> ... -> dims[n]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::Config(format!(
                "mlp needs n+1 dims for n activations, got {} dims and {} activations",
                dims.len(),
                activations.len()
            )));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &a)| Dense::init(w[0], w[1], a, rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense<T>>) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::shape(
                    "mlp chain",
                    w[0].weight.shape(),
                    w[1].weight.shape(),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter tensors in (weight, bias) order per layer.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")])
            .collect()
    }

    /// Forward pass on a `[batch, in]` tensor, no graph recorded.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = input.clone();
        for l in &self.layers {
            if h.rank() != 2 || h.cols() != l.input_dim() {
                return Err(Error::shape("mlp forward", h.shape(), l.weight.shape()));
            }
            let pre = h.matmul(&l.weight)?.add(&l.bias)?;
            h = activate(&pre, l.activation);
        }
        Ok(h)
    }

    /// Registers every layer's parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<DenseVars> {
        self.layers
            .iter()
            .map(|l| {
                let (w, b) = (l.weight.clone(), l.bias.clone());
                if trainable {
                    DenseVars {
                        weight: g.param(w),
                        bias: g.param(b),
                    }
                } else {
                    DenseVars {
                        weight: g.constant(w),
                        bias: g.constant(b),
                    }
                }
            })
            .collect()
    }

    /// Recorded forward pass; returns the output activation.
    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &[DenseVars], x: Var) -> Result<Var> {
        Ok(self.forward_graph_trace(g, vars, x)?.output)
    }

    /// Recorded forward pass keeping per-layer pre-activations, which
    /// [`Mlp::input_vjp_graph`] needs.
    pub fn forward_graph_trace(&self, g: &mut Graph<T>, vars: &[DenseVars], x: Var) -> Result<MlpTrace> {
        let xs = g.shape(x);
        if xs.len() != 2 || xs[1] != self.input_dim() {
            return Err(Error::shape("mlp forward", xs, self.layers[0].weight.shape()));
        }
        let mut h = x;
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len());
        for (l, v) in self.layers.iter().zip(vars) {
            let lin = g.matmul(h, v.weight)?;
            let pre = g.add(lin, v.bias)?;
            pre_acts.push(pre);
            h = match l.activation {
                Activation::Relu => g.relu(pre),
                Activation::Linear => pre,
                Activation::Sigmoid => g.sigmoid(pre),
            };
            acts.push(h);
        }
        Ok(MlpTrace {
            pre_acts,
            acts,
            output: h,
        })
    }

    /// Vector-Jacobian product with respect to the network input, built from
    /// graph operations so that it can itself be differentiated.
    ///
    /// `cot_last_pre` is the cotangent on the last layer's pre-activation.
    /// ReLU masks enter as constants (their derivative is zero almost everywhere).
    pub fn input_vjp_graph(
        &self,
        g: &mut Graph<T>,
        vars: &[DenseVars],
        trace: &MlpTrace,
        cot_last_pre: Var,
    ) -> Result<Var> {
        let n = self.layers.len();
        let mut cot_pre = cot_last_pre;
        for li in (0..n).rev() {
            // cotangent on this layer's input
            let cot_in = g.matmul_t(cot_pre, vars[li].weight, false, true)?;
            if li == 0 {
                return Ok(cot_in);
            }
            let prev = li - 1;
            cot_pre = match self.layers[prev].activation {
                Activation::Linear => cot_in,
                Activation::Relu => {
                    let mask = g
                        .value(trace.pre_acts[prev])
                        .map(|v| if v > T::zero() { T::one() } else { T::zero() });
                    let m = g.constant(mask);
                    g.mul(cot_in, m)?
                }
                Activation::Sigmoid => {
                    let s = trace.acts[prev];
                    let one_minus = g.neg(s);
                    let one_minus = g.offset(one_minus, T::one());
                    let ds = g.mul(s, one_minus)?;
                    g.mul(cot_in, ds)?
                }
            };
        }
        unreachable!("mlp has at least one layer")
    }
}

/// Nodes recorded by [`Mlp::forward_graph_trace`].
#[derive(Clone, Debug)]
pub struct MlpTrace {
    pub pre_acts: Vec<Var>,
    pub acts: Vec<Var>,
    pub output: Var,
}

pub fn activate<T: Scalar>(x: &Tensor<T>, a: Activation) -> Tensor<T> {
    match a {
        Activation::Relu => x.map(|v| v.max(T::zero())),
        Activation::Linear => x.clone(),
        Activation::Sigmoid => x.map(sigmoid),
    }
}
