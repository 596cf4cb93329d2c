//! Average pooling over the length axis.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn avg_pool1d_out_len(len: usize, pool: usize, stride: usize) -> Result<usize> {
    if pool == 0 || stride == 0 {
        return Err(Error::domain("pool and stride must be positive".to_string()));
    }
    if pool > len {
        return Err(Error::dimension(format!(
            "pool window {pool} exceeds input length {len}"
        )));
    }
    Ok((len - pool) / stride + 1)
}

/// Mean over a `pool`-length window advanced by `stride`, `(B, C, L) -> (B, C, Lo)`.
pub fn avg_pool1d_forward(input: &Tensor, pool: usize, stride: usize) -> Result<Tensor> {
    let (b, c, len) = pool_shape(input)?;
    let lo = avg_pool1d_out_len(len, pool, stride)?;
    let x = input.data();
    let inv = 1.0 / pool as f64;
    let mut out = vec![0.0f64; b * c * lo];
    for row in 0..b * c {
        let xr = row * len;
        let or = row * lo;
        for t in 0..lo {
            let start = t * stride;
            let mut acc = 0.0;
            for j in 0..pool {
                acc += x[xr + start + j];
            }
            out[or + t] = acc * inv;
        }
    }
    Tensor::new(vec![b, c, lo], out)
}

/// Spreads each output gradient evenly over its window; overlapping windows
/// accumulate.
pub fn avg_pool1d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    pool: usize,
    stride: usize,
) -> Result<Tensor> {
    let (b, c, len) = pool_shape(input)?;
    let lo = avg_pool1d_out_len(len, pool, stride)?;
    debug_assert_eq!(grad_out.shape(), &[b, c, lo]);
    let g = grad_out.data();
    let inv = 1.0 / pool as f64;
    let mut dx = vec![0.0f64; b * c * len];
    for row in 0..b * c {
        let xr = row * len;
        let or = row * lo;
        for t in 0..lo {
            let gv = g[or + t] * inv;
            let start = t * stride;
            for j in 0..pool {
                dx[xr + start + j] += gv;
            }
        }
    }
    Tensor::new(vec![b, c, len], dx)
}

fn pool_shape(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, c, l] => Ok((b, c, l)),
        _ => Err(Error::dimension(format!(
            "expected (batch, channels, length) tensor, got shape {:?}",
            t.shape()
        ))),
    }
}
