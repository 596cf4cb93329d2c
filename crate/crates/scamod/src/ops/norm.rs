//! Batch normalization over the channel axis.
//!
//! Conv tensors `(B, C, L)` normalize each channel over `B * L` samples;
//! dense tensors `(B, F)` normalize each feature over `B`. Variance is the
//! biased (population) estimate, which is also what flows into the running
//! statistics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
/// running = momentum * running + (1 - momentum) * batch
pub const BN_MOMENTUM: f64 = 0.99;

/// Per-channel batch statistics saved by the train-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn bn_shape(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, c, l] => Ok((b, c, l)),
        [b, f] => Ok((b, f, 1)),
        _ => Err(Error::dimension(format!(
            "batch norm expects rank-2 or rank-3 input, got {:?}",
            t.shape()
        ))),
    }
}

/// Normalizes by batch statistics, then scales and shifts.
pub fn batch_norm_train(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Tensor, BatchNormCache)> {
    let (b, c, l) = bn_shape(input)?;
    if b < 2 {
        return Err(Error::DegenerateBatch(b));
    }
    check_affine(c, gamma, beta)?;
    let x = input.data();
    let n = (b * l) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for bi in 0..b {
        for ci in 0..c {
            let row = (bi * c + ci) * l;
            for t in 0..l {
                mean[ci] += x[row + t];
            }
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for bi in 0..b {
        for ci in 0..c {
            let row = (bi * c + ci) * l;
            for t in 0..l {
                let d = x[row + t] - mean[ci];
                var[ci] += d * d;
            }
        }
    }
    for v in &mut var {
        *v /= n;
    }

    let g = gamma.data();
    let be = beta.data();
    let mut out = vec![0.0f64; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let row = (bi * c + ci) * l;
            let inv = 1.0 / (var[ci] + BN_EPSILON).sqrt();
            for t in 0..l {
                out[row + t] = g[ci] * (x[row + t] - mean[ci]) * inv + be[ci];
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        BatchNormCache { mean, var },
    ))
}

/// Normalizes by running statistics; used outside training.
pub fn batch_norm_infer(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
) -> Result<Tensor> {
    let (b, c, l) = bn_shape(input)?;
    check_affine(c, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::dimension(format!(
            "running stats length {} does not match {c} channels",
            running_mean.len()
        )));
    }
    let x = input.data();
    let g = gamma.data();
    let be = beta.data();
    let mut out = vec![0.0f64; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let row = (bi * c + ci) * l;
            let inv = 1.0 / (running_var[ci] + BN_EPSILON).sqrt();
            for t in 0..l {
                out[row + t] = g[ci] * (x[row + t] - running_mean[ci]) * inv + be[ci];
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Train-mode backward; accounts for the mean/variance dependence on the
/// batch.
pub fn batch_norm_backward(
    grad_out: &Tensor,
    input: &Tensor,
    gamma: &Tensor,
    cache: &BatchNormCache,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, l) = bn_shape(input)?;
    let x = input.data();
    let g = grad_out.data();
    let gm = gamma.data();
    let n = (b * l) as f64;

    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let mut sum_g = vec![0.0f64; c]; // sum of dL/dxhat
    let mut sum_gx = vec![0.0f64; c]; // sum of dL/dxhat * xhat
    for bi in 0..b {
        for ci in 0..c {
            let row = (bi * c + ci) * l;
            let inv = 1.0 / (cache.var[ci] + BN_EPSILON).sqrt();
            for t in 0..l {
                let xhat = (x[row + t] - cache.mean[ci]) * inv;
                dgamma[ci] += g[row + t] * xhat;
                dbeta[ci] += g[row + t];
                let dxhat = g[row + t] * gm[ci];
                sum_g[ci] += dxhat;
                sum_gx[ci] += dxhat * xhat;
            }
        }
    }

    let mut dx = vec![0.0f64; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let row = (bi * c + ci) * l;
            let inv = 1.0 / (cache.var[ci] + BN_EPSILON).sqrt();
            for t in 0..l {
                let xhat = (x[row + t] - cache.mean[ci]) * inv;
                let dxhat = g[row + t] * gm[ci];
                dx[row + t] = inv / n * (n * dxhat - sum_g[ci] - xhat * sum_gx[ci]);
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

fn check_affine(c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.len() != c || beta.len() != c {
        return Err(Error::dimension(format!(
            "gamma/beta length {}/{} does not match {c} channels",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::assert_close;

    #[test]
    fn normalizes_simple_batch() {
        // batch [0, 2]: mean 1, std 1
        let x = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
        let ones = Tensor::from_vec(vec![1.0]);
        let zeros = Tensor::from_vec(vec![0.0]);
        let (out, cache) = batch_norm_train(&x, &ones, &zeros).unwrap();
        assert_close(out.data()[0], -1.0, 1e-4);
        assert_close(out.data()[1], 1.0, 1e-4);
        assert_close(cache.mean[0], 1.0, 1e-12);
        assert_close(cache.var[0], 1.0, 1e-12);
    }

    #[test]
    fn batch_of_one_is_degenerate() {
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let ones = Tensor::from_vec(vec![1.0; 3]);
        let zeros = Tensor::from_vec(vec![0.0; 3]);
        assert!(matches!(
            batch_norm_train(&x, &ones, &zeros),
            Err(Error::DegenerateBatch(1))
        ));
    }

    #[test]
    fn zero_gamma_collapses_to_beta() {
        let x = Tensor::new(vec![2, 2], vec![5.0, -3.0, 2.0, 0.5]).unwrap();
        let gamma = Tensor::from_vec(vec![0.0, 0.0]);
        let beta = Tensor::from_vec(vec![0.25, -1.5]);
        let (out, _) = batch_norm_train(&x, &gamma, &beta).unwrap();
        assert_eq!(out.data(), &[0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn infer_with_unit_stats_is_identity() {
        let x = Tensor::new(vec![1, 2], vec![0.7, -0.2]).unwrap();
        let gamma = Tensor::from_vec(vec![1.0, 1.0]);
        let beta = Tensor::from_vec(vec![0.0, 0.0]);
        let out = batch_norm_infer(&x, &gamma, &beta, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5); // up to epsilon
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(5);
        let (b, c, l) = (4, 3, 5);
        let x = Tensor::new(vec![b, c, l], (0..b * c * l).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let gamma = Tensor::new(vec![c], (0..c).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
        let beta = Tensor::new(vec![c], (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let (out, cache) = batch_norm_train(&x, &gamma, &beta).unwrap();
        let g = Tensor::new(out.shape().to_vec(), (0..out.len()).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let (dx, dgamma, dbeta) = batch_norm_backward(&g, &x, &gamma, &cache).unwrap();

        let loss = |x: &Tensor, gamma: &Tensor, beta: &Tensor| -> f64 {
            let (o, _) = batch_norm_train(x, gamma, beta).unwrap();
            o.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, &gamma, &beta) - loss(&xm, &gamma, &beta)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-5, "dx[{i}]: {fd} vs {}", dx.data()[i]);
        }
        for i in 0..c {
            let mut gp = gamma.clone();
            gp.data_mut()[i] += h;
            let mut gm2 = gamma.clone();
            gm2.data_mut()[i] -= h;
            let fd = (loss(&x, &gp, &beta) - loss(&x, &gm2, &beta)) / (2.0 * h);
            assert!((fd - dgamma.data()[i]).abs() < 1e-5);

            let mut bp = beta.clone();
            bp.data_mut()[i] += h;
            let mut bm = beta.clone();
            bm.data_mut()[i] -= h;
            let fd = (loss(&x, &gamma, &bp) - loss(&x, &gamma, &bm)) / (2.0 * h);
            assert!((fd - dbeta.data()[i]).abs() < 1e-5);
        }
    }
}
