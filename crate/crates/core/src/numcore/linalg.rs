//! Small dense factorizations on row-major `n x n` buffers.
//!
//! Latent dimensions stay small (at most a few dozen), so everything here is
//! the textbook O(n^3) algorithm without blocking.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower Cholesky factor `L` with `A = L L^T`.
pub fn cholesky<T: Scalar>(a: &[T], n: usize) -> Result<Vec<T>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![T::zero(); n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return Err(Error::Numerical(format!(
                "Cholesky pivot {j} is {d} (matrix not positive definite)"
            )));
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(l)
}

/// `log det A` from its Cholesky factor.
pub fn cholesky_logdet<T: Scalar>(l: &[T], n: usize) -> T {
    let two = T::lit(2.0);
    (0..n).map(|i| two * l[i * n + i].ln()).sum()
}

/// Inverse of a lower-triangular matrix (result is lower-triangular).
pub fn lower_inverse<T: Scalar>(l: &[T], n: usize) -> Vec<T> {
    let mut inv = vec![T::zero(); n * n];
    for j in 0..n {
        inv[j * n + j] = T::one() / l[j * n + j];
        for i in j + 1..n {
            let mut s = T::zero();
            for k in j..i {
                s += l[i * n + k] * inv[k * n + j];
            }
            inv[i * n + j] = -s / l[i * n + i];
        }
    }
    inv
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky factor.
pub fn spd_inverse<T: Scalar>(a: &[T], n: usize) -> Result<Vec<T>> {
    let l = cholesky(a, n)?;
    Ok(spd_inverse_from_factor(&l, n))
}

/// `(L L^T)^{-1} = L^{-T} L^{-1}`.
pub fn spd_inverse_from_factor<T: Scalar>(l: &[T], n: usize) -> Vec<T> {
    let li = lower_inverse(l, n);
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = T::zero();
            for k in i.max(j)..n {
                s += li[k * n + i] * li[k * n + j];
            }
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    out
}

/// General inverse by Gauss-Jordan elimination with partial pivoting.
pub fn inverse<T: Scalar>(a: &[T], n: usize) -> Result<Vec<T>> {
    let mut m = a.to_vec();
    let mut inv = vec![T::zero(); n * n];
    for i in 0..n {
        inv[i * n + i] = T::one();
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| {
                m[x * n + col]
                    .abs()
                    .partial_cmp(&m[y * n + col].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(col);
        let p = m[piv * n + col];
        if p == T::zero() || !p.is_finite() {
            return Err(Error::Numerical("singular matrix in inverse".into()));
        }
        if piv != col {
            for k in 0..n {
                m.swap(piv * n + k, col * n + k);
                inv.swap(piv * n + k, col * n + k);
            }
        }
        let rp = T::one() / p;
        for k in 0..n {
            m[col * n + k] *= rp;
            inv[col * n + k] *= rp;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == T::zero() {
                continue;
            }
            for k in 0..n {
                let (mc, ic) = (m[col * n + k], inv[col * n + k]);
                m[r * n + k] -= f * mc;
                inv[r * n + k] -= f * ic;
            }
        }
    }
    Ok(inv)
}

/// `y = A x` for a row-major `n x n` matrix.
pub fn matvec<T: Scalar>(a: &[T], x: &[T]) -> Vec<T> {
    let n = x.len();
    (0..n)
        .map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum())
        .collect()
}

/// `x^T A x`.
pub fn quad_form<T: Scalar>(a: &[T], x: &[T]) -> T {
    let n = x.len();
    let mut s = T::zero();
    for i in 0..n {
        for j in 0..n {
            s += x[i] * a[i * n + j] * x[j];
        }
    }
    s
}

/// `C = A B` for square `n x n` matrices.
pub fn matmul_square<T: Scalar>(a: &[T], b: &[T], n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// `tr(A B)` for square matrices.
pub fn trace_product<T: Scalar>(a: &[T], b: &[T], n: usize) -> T {
    let mut s = T::zero();
    for i in 0..n {
        for k in 0..n {
            s += a[i * n + k] * b[k * n + i];
        }
    }
    s
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues<T: Scalar>(a: &[T], n: usize) -> Vec<T> {
    let mut m = a.to_vec();
    for _sweep in 0..64 {
        let mut off = T::zero();
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if !(off > T::epsilon() * T::epsilon()) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<T> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    ev
}
