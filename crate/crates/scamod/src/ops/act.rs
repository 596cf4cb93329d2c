//! Activation functions: SELU, sigmoid, and the row-wise softmax.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SELU_LAMBDA: f64 = 1.05070098;
const SELU_ALPHA: f64 = 1.67326324;

/// `x > 0 -> lambda * x; x <= 0 -> lambda * alpha * (e^x - 1)`.
pub fn selu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v = if *v > 0.0 {
            SELU_LAMBDA * *v
        } else {
            SELU_LAMBDA * SELU_ALPHA * (v.exp() - 1.0)
        };
    }
    out
}

pub fn selu_backward(grad_out: &Tensor, input: &Tensor) -> Tensor {
    let mut dx = grad_out.clone();
    for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
        let slope = if x > 0.0 {
            SELU_LAMBDA
        } else {
            SELU_LAMBDA * SELU_ALPHA * x.exp()
        };
        *d *= slope;
    }
    dx
}

pub fn sigmoid_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
    out
}

/// Takes the forward *output* (not the input): s' = s * (1 - s).
pub fn sigmoid_backward(grad_out: &Tensor, output: &Tensor) -> Tensor {
    let mut dx = grad_out.clone();
    for (d, &s) in dx.data_mut().iter_mut().zip(output.data()) {
        *d *= s * (1.0 - s);
    }
    dx
}

/// Max-shifted softmax over the last axis of a `(B, K)` tensor.
pub fn softmax_forward(input: &Tensor) -> Result<Tensor> {
    let (b, k) = match *input.shape() {
        [b, k] => (b, k),
        [k] => (1, k),
        _ => {
            return Err(Error::dimension(format!(
                "softmax expects a rank-1 or rank-2 tensor, got {:?}",
                input.shape()
            )))
        }
    };
    let x = input.data();
    let mut out = vec![0.0f64; b * k];
    for bi in 0..b {
        let row = &x[bi * k..(bi + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out[bi * k..(bi + 1) * k].iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in &mut out[bi * k..(bi + 1) * k] {
            *o /= sum;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Jacobian-vector product using the forward output `s`:
/// `dx_i = s_i * (g_i - sum_j g_j s_j)` per row.
pub fn softmax_backward(grad_out: &Tensor, output: &Tensor) -> Tensor {
    let shape = output.shape().to_vec();
    let k = *shape.last().unwrap();
    let b = output.len() / k;
    let s = output.data();
    let g = grad_out.data();
    let mut dx = vec![0.0f64; b * k];
    for bi in 0..b {
        let off = bi * k;
        let dot: f64 = (0..k).map(|i| g[off + i] * s[off + i]).sum();
        for i in 0..k {
            dx[off + i] = s[off + i] * (g[off + i] - dot);
        }
    }
    Tensor::new(shape, dx).expect("shape preserved")
}
