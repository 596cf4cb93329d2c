//! Fully connected affine map.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(B, F) x (U, F)^T + (U) -> (B, U)`. Activation is applied separately.
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, f) = mat_shape(input)?;
    let (u, wf) = mat_shape(weights)?;
    if wf != f {
        return Err(Error::dimension(format!(
            "weights expect {wf} input features, input has {f}"
        )));
    }
    if bias.len() != u {
        return Err(Error::dimension(format!(
            "bias length {} does not match {u} units",
            bias.len()
        )));
    }
    let x = input.data();
    let w = weights.data();
    let bs = bias.data();
    let mut out = vec![0.0f64; b * u];
    for bi in 0..b {
        let xr = bi * f;
        for ui in 0..u {
            let wr = ui * f;
            let mut acc = bs[ui];
            for i in 0..f {
                acc += w[wr + i] * x[xr + i];
            }
            out[bi * u + ui] = acc;
        }
    }
    Tensor::new(vec![b, u], out)
}

pub fn dense_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, f) = mat_shape(input)?;
    let (u, _) = mat_shape(weights)?;
    debug_assert_eq!(grad_out.shape(), &[b, u]);
    let x = input.data();
    let w = weights.data();
    let g = grad_out.data();
    let mut dx = vec![0.0f64; b * f];
    let mut dw = vec![0.0f64; u * f];
    let mut db = vec![0.0f64; u];
    for bi in 0..b {
        let xr = bi * f;
        for ui in 0..u {
            let gv = g[bi * u + ui];
            db[ui] += gv;
            let wr = ui * f;
            for i in 0..f {
                dw[wr + i] += gv * x[xr + i];
                dx[xr + i] += gv * w[wr + i];
            }
        }
    }
    Ok((
        Tensor::new(vec![b, f], dx)?,
        Tensor::new(vec![u, f], dw)?,
        Tensor::new(vec![u], db)?,
    ))
}

fn mat_shape(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::dimension(format!(
            "expected rank-2 tensor, got shape {:?}",
            t.shape()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_map() {
        let x = Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = dense_forward(&x, &w, &Tensor::zeros(vec![2])).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn hand_affine() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let out = dense_forward(&x, &w, &Tensor::zeros(vec![1])).unwrap();
        assert_eq!(out.data(), &[3.0]);

        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let w = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let b = Tensor::from_vec(vec![1.0]);
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data(), &[3.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            dense_forward(&x, &w, &Tensor::zeros(vec![1])),
            Err(Error::Dimension(_))
        ));
    }
}
