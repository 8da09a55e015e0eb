//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the backward sweep is a single reverse pass.

use crate::error::{Error, Result};
use crate::numcore::linalg;
use crate::numcore::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    Offset(Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    SumAxis { x: Var, axis: usize, keep: bool },
    ConcatRows(Vec<Var>),
    Cholesky(Var),
    Inverse(Var),
    LogSoftmax(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            MatMul { a, b, .. } | Bmm { a, b, .. } => vec![*a, *b],
            Neg(x) | Scale(x, _) | Offset(x) | Exp(x) | Ln(x) | Relu(x) | Sigmoid(x)
            | Softplus(x) | Square(x) | Sqrt(x) | Transpose(x) | Reshape(x) | SumAll(x)
            | Cholesky(x) | Inverse(x) | LogSoftmax(x) => vec![*x],
            SumAxis { x, .. } => vec![*x],
            ConcatRows(v) => v.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. Build it forward, then call [`Graph::backward`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, x: T) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Copy of `x` cut off from the gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_with(self.value(b), |p, q| p / q)?;
        Ok(self.push(y, Op::Div(a, b)))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| -v);
        self.push(y, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).scale(s);
        self.push(y, Op::Scale(x, s))
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).map(|v| v + c);
        self.push(y, Op::Offset(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(T::exp);
        self.push(y, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let y = self.value(x).map(T::ln);
        self.push(y, Op::Ln(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let y = self.value(x).map(softplus);
        self.push(y, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * v);
        self.push(y, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let y = self.value(x).map(T::sqrt);
        self.push(y, Op::Sqrt(x))
    }

    /// `op(a) op(b)` for rank-2 operands.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let y = self.value(a).matmul_t(self.value(b), ta, tb)?;
        Ok(self.push(y, Op::MatMul { a, b, ta, tb }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched `op(a) op(b)` over the leading axis of rank-3 operands.
    pub fn bmm_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let y = self.value(a).bmm_t(self.value(b), ta, tb)?;
        Ok(self.push(y, Op::Bmm { a, b, ta, tb }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).transpose()?;
        Ok(self.push(y, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::SumAll(x))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keep: bool) -> Result<Var> {
        let y = self.value(x).sum_axis(axis, keep)?;
        Ok(self.push(y, Op::SumAxis { x, axis, keep }))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize(n).unwrap_or_else(T::one))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_rows(&vals)?;
        Ok(self.push(y, Op::ConcatRows(parts.to_vec())))
    }

    /// Batched lower Cholesky factor of `[b, n, n]` symmetric positive-definite input.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let (b, n) = batch_square(self.value(a))?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(b * n * n);
        for i in 0..b {
            out.extend(linalg::cholesky(&src[i * n * n..(i + 1) * n * n], n)?);
        }
        let y = Tensor::new(&[b, n, n], out)?;
        Ok(self.push(y, Op::Cholesky(a)))
    }

    /// Batched general inverse of `[b, n, n]` input.
    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        let (b, n) = batch_square(self.value(a))?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(b * n * n);
        for i in 0..b {
            out.extend(linalg::inverse(&src[i * n * n..(i + 1) * n * n], n)?);
        }
        let y = Tensor::new(&[b, n, n], out)?;
        Ok(self.push(y, Op::Inverse(a)))
    }

    /// Row-wise log-softmax of a rank-2 tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(Error::shape("log_softmax", v.shape(), &[]));
        }
        let cols = v.cols();
        let mut out = Vec::with_capacity(v.len());
        for r in 0..v.rows() {
            let row = v.row(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&z| z - lse));
        }
        let y = Tensor::new(&[v.rows(), cols], out)?;
        Ok(self.push(y, Op::LogSoftmax(x)))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).len() != 1 {
            return Err(Error::Usage(format!(
                "backward from non-scalar output of shape {:?} needs an explicit cotangent",
                self.shape(out)
            )));
        }
        let seed = Tensor::full(self.shape(out), T::one());
        self.backward_with(out, seed)
    }

    /// Reverse sweep seeded with an explicit cotangent for `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(out) {
            return Err(Error::shape("backward seed", seed.shape(), self.shape(out)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (input, contrib) in self.local_grads(i, &g)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
            // Interior gradients are dropped once propagated.
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(*a) {
                    out.push((*a, g.sum_to_shape(val(*a).shape())?));
                }
                if want(*b) {
                    out.push((*b, g.sum_to_shape(val(*b).shape())?));
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    out.push((*a, g.sum_to_shape(val(*a).shape())?));
                }
                if want(*b) {
                    out.push((*b, g.map(|x| -x).sum_to_shape(val(*b).shape())?));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    out.push((*a, g.mul(val(*b))?.sum_to_shape(val(*a).shape())?));
                }
                if want(*b) {
                    out.push((*b, g.mul(val(*a))?.sum_to_shape(val(*b).shape())?));
                }
            }
            Op::Div(a, b) => {
                if want(*a) {
                    let ga = g.zip_with(val(*b), |gi, bi| gi / bi)?;
                    out.push((*a, ga.sum_to_shape(val(*a).shape())?));
                }
                if want(*b) {
                    // d(a/b)/db = -y/b
                    let yb = y.zip_with(val(*b), |yi, bi| -yi / bi)?;
                    out.push((*b, g.mul(&yb)?.sum_to_shape(val(*b).shape())?));
                }
            }
            Op::Neg(x) => out.push((*x, g.map(|v| -v))),
            Op::Scale(x, s) => out.push((*x, g.scale(*s))),
            Op::Offset(x) => out.push((*x, g.clone())),
            Op::Exp(x) => out.push((*x, g.mul(y)?)),
            Op::Ln(x) => out.push((*x, g.zip_with(val(*x), |gi, xi| gi / xi)?)),
            Op::Relu(x) => out.push((
                *x,
                g.zip_with(val(*x), |gi, xi| if xi > T::zero() { gi } else { T::zero() })?,
            )),
            Op::Sigmoid(x) => {
                out.push((*x, g.zip_with(y, |gi, s| gi * s * (T::one() - s))?));
            }
            Op::Softplus(x) => out.push((*x, g.zip_with(val(*x), |gi, xi| gi * sigmoid(xi))?)),
            Op::Square(x) => {
                let two = T::lit(2.0);
                out.push((*x, g.zip_with(val(*x), |gi, xi| two * gi * xi)?));
            }
            Op::Sqrt(x) => {
                let half = T::lit(0.5);
                out.push((*x, g.zip_with(y, |gi, yi| half * gi / yi)?));
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                if want(*a) {
                    let ga = if *ta {
                        bv.matmul_t(g, *tb, true)?
                    } else {
                        g.matmul_t(bv, false, !*tb)?
                    };
                    out.push((*a, ga));
                }
                if want(*b) {
                    let gb = if *tb {
                        g.matmul_t(av, true, *ta)?
                    } else {
                        av.matmul_t(g, !*ta, false)?
                    };
                    out.push((*b, gb));
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                if want(*a) {
                    let ga = if *ta {
                        bv.bmm_t(g, *tb, true)?
                    } else {
                        g.bmm_t(bv, false, !*tb)?
                    };
                    out.push((*a, ga));
                }
                if want(*b) {
                    let gb = if *tb {
                        g.bmm_t(av, true, *ta)?
                    } else {
                        av.bmm_t(g, !*ta, false)?
                    };
                    out.push((*b, gb));
                }
            }
            Op::Transpose(x) => out.push((*x, g.transpose()?)),
            Op::Reshape(x) => out.push((*x, g.clone().reshape(val(*x).shape())?)),
            Op::SumAll(x) => out.push((*x, Tensor::full(val(*x).shape(), g.item()))),
            Op::SumAxis { x, axis, keep } => {
                let mut kept = val(*x).shape().to_vec();
                kept[*axis] = 1;
                let gk = if *keep { g.clone() } else { g.clone().reshape(&kept)? };
                out.push((*x, Tensor::zeros(val(*x).shape()).add(&gk)?));
            }
            Op::ConcatRows(parts) => {
                let inner: usize = g.shape()[1..].iter().product();
                let mut row = 0;
                for p in parts {
                    let shape = val(*p).shape();
                    let n = shape[0] * inner;
                    if want(*p) {
                        let chunk = g.data()[row * inner..row * inner + n].to_vec();
                        out.push((*p, Tensor::new(shape, chunk)?));
                    }
                    row += shape[0];
                }
            }
            Op::Cholesky(a) => out.push((*a, cholesky_backward(y, g)?)),
            Op::Inverse(a) => {
                // dA = -Y^T G Y^T
                let yt = y.transpose()?;
                let t = yt.bmm_t(g, false, false)?.bmm_t(&yt, false, false)?;
                out.push((*a, t.map(|v| -v)));
            }
            Op::LogSoftmax(x) => {
                let cols = y.cols();
                let mut gx = Vec::with_capacity(y.len());
                for r in 0..y.rows() {
                    let gs: T = g.row(r).iter().copied().sum();
                    for c in 0..cols {
                        gx.push(g.row(r)[c] - y.row(r)[c].exp() * gs);
                    }
                }
                out.push((*x, Tensor::new(y.shape(), gx)?));
            }
        }
        Ok(out)
    }
}

fn batch_square<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::shape("batched square matrix", s, &[]));
    }
    Ok((s[0], s[1]))
}

/// Adjoint of `A -> chol(A)` for symmetric `A`:
/// `sym(L^{-T} Phi(L^T Lbar) L^{-1})`, `Phi` = lower triangle with halved diagonal.
fn cholesky_backward<T: Scalar>(l: &Tensor<T>, gl: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, n) = batch_square(l)?;
    let half = T::lit(0.5);
    let mut out = Vec::with_capacity(b * n * n);
    for k in 0..b {
        let lk = &l.data()[k * n * n..(k + 1) * n * n];
        let gk = &gl.data()[k * n * n..(k + 1) * n * n];
        // phi = tril(L^T tril(Lbar)), diagonal halved
        let mut phi = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = T::zero();
                for p in i.max(j)..n {
                    // (L^T)_{ip} = L_{pi}, only tril of Lbar counts
                    if p >= j {
                        s += lk[p * n + i] * gk[p * n + j];
                    }
                }
                phi[i * n + j] = if i == j { s * half } else { s };
            }
        }
        let li = linalg::lower_inverse(lk, n);
        // L^{-T} phi L^{-1}
        let mut tmp = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = T::zero();
                for p in 0..n {
                    s += li[p * n + i] * phi[p * n + j];
                }
                tmp[i * n + j] = s;
            }
        }
        let mut ga = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = T::zero();
                for p in 0..n {
                    s += tmp[i * n + p] * li[p * n + j];
                }
                ga[i * n + j] = s;
            }
        }
        for i in 0..n {
            for j in 0..n {
                out.push(half * (ga[i * n + j] + ga[j * n + i]));
            }
        }
    }
    Tensor::new(l.shape(), out)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three_has_gradient_six() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.wrt(x).item(), 6.0);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let c = g.scalar(5.0);
        let gr = g.backward(c).unwrap();
        assert_eq!(gr.wrt(x).item(), 0.0);
    }

    #[test]
    fn non_scalar_seed_is_a_usage_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
        let gr = g
            .backward_with(y, Tensor::vector(vec![1.0, 0.0]))
            .unwrap();
        assert!((gr.wrt(x).data()[0] - 1f64.exp()).abs() < 1e-15);
        assert_eq!(gr.wrt(x).data()[1], 0.0);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = (x + x) * x = 2x^2, f' = 4x
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(1.5));
        let s = g.add(x, x).unwrap();
        let f = g.mul(s, x).unwrap();
        assert_eq!(g.backward(f).unwrap().wrt(x).item(), 6.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
