//! Forward operations and their hand-derived backward passes.
//!
//! Every `*_backward` takes the upstream gradient of the op's output and
//! returns gradients with respect to its inputs.

use crate::error::{Error, Result};
use crate::math::Tensor;

/// `c = a·b + beta·c` on raw row-major buffers, where `a` is `m×k` and `b`
/// is `k×n`. A `*_t` flag means the operand is stored transposed (`k×m`
/// resp. `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the buffer lengths were checked above against the strides used.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul of {:?} and {:?}: inner dimensions differ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, a.data(), false, b.data(), false, 0.0, out.data_mut());
    Ok(out)
}

/// Gradients of `a·b`: `(dC·bᵀ, aᵀ·dC)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = a.dims2()?;
    let (_, n) = b.dims2()?;
    if grad_out.shape() != [m, n] {
        return Err(Error::dim(format!(
            "matmul backward: upstream gradient {:?} does not match output [{m}, {n}]",
            grad_out.shape()
        )));
    }
    let mut da = Tensor::zeros(&[m, k]);
    let mut db = Tensor::zeros(&[k, n]);
    gemm(m, n, k, grad_out.data(), false, b.data(), true, 0.0, da.data_mut());
    gemm(k, m, n, a.data(), true, grad_out.data(), false, 0.0, db.data_mut());
    Ok((da, db))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn unary(op: UnaryOp, x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let f: fn(f64) -> f64 = match op {
        UnaryOp::Sigmoid => sigmoid,
        UnaryOp::Tanh => f64::tanh,
    };
    out.data_mut().iter_mut().for_each(|v| *v = f(*v));
    out
}

/// Backward pass expressed through the forward output `y`.
pub fn unary_backward(op: UnaryOp, y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    y.check_same_shape(grad_out)?;
    let mut dx = grad_out.clone();
    for (d, &y) in dx.data_mut().iter_mut().zip(y.data()) {
        *d *= match op {
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Tanh => 1.0 - y * y,
        };
    }
    Ok(dx)
}

pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.check_same_shape(b)?;
    let mut out = a.clone();
    for (o, &b) in out.data_mut().iter_mut().zip(b.data()) {
        match op {
            BinaryOp::Add => *o += b,
            BinaryOp::Mul => *o *= b,
        }
    }
    Ok(out)
}

pub fn binary_backward(op: BinaryOp, a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    a.check_same_shape(b)?;
    a.check_same_shape(grad_out)?;
    match op {
        BinaryOp::Add => Ok((grad_out.clone(), grad_out.clone())),
        BinaryOp::Mul => Ok((binary(op, grad_out, b)?, binary(op, grad_out, a)?)),
    }
}

/// In-place softmax with max subtraction.
pub(crate) fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(values)`, stable for large magnitudes.
pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn log_softmax_into(values: &[f64], out: &mut Vec<f64>) {
    let lse = log_sum_exp(values);
    out.clear();
    out.extend(values.iter().map(|v| v - lse));
}

/// Softmax over all entries of `logits`.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.is_empty() {
        return Err(Error::dim("softmax of an empty tensor"));
    }
    let mut out = logits.clone();
    softmax_in_place(out.data_mut());
    Ok(out)
}

/// Jacobian-vector product of softmax: `dx = y ⊙ (dy − ⟨y, dy⟩)`.
pub fn softmax_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    y.check_same_shape(grad_out)?;
    let dot: f64 = y.data().iter().zip(grad_out.data()).map(|(a, b)| a * b).sum();
    let mut dx = grad_out.clone();
    for (d, &p) in dx.data_mut().iter_mut().zip(y.data()) {
        *d = p * (*d - dot);
    }
    Ok(dx)
}

/// Negative log-likelihood of `target` under `softmax(logits)`, and its
/// gradient with respect to the logits (`softmax − onehot`).
pub fn cross_entropy(logits: &Tensor, target: usize) -> Result<(f64, Tensor)> {
    if logits.is_empty() {
        return Err(Error::dim("cross entropy over empty logits"));
    }
    if target >= logits.len() {
        return Err(Error::Index {
            what: "target",
            index: target,
            size: logits.len(),
        });
    }
    let loss = log_sum_exp(logits.data()) - logits.data()[target];
    let mut grad = softmax(logits)?;
    grad.data_mut()[target] -= 1.0;
    Ok((loss, grad))
}
