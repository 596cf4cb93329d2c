//! Reconstruction and classification losses.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped here before any `log`, so a confidently wrong
/// prediction costs a large finite penalty instead of infinity.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean squared error `(1/m) * sum((x - y)^2)` per sample, averaged over the
/// batch. Batch is the leading axis; rank-1 tensors are a batch of one.
pub fn mse_forward(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::dimension(format!(
            "mse operands differ in shape: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let (b, m) = batch_split(x);
    let mut total = 0.0f64;
    for (a, c) in x.data().iter().zip(y.data()) {
        let d = a - c;
        total += d * d;
    }
    let v = total / (b as f64 * m as f64);
    if !v.is_finite() {
        return Err(Error::Numeric("mse is not finite".to_string()));
    }
    Ok(v)
}

/// Gradients of the batch-mean MSE w.r.t. both operands.
pub fn mse_backward(upstream: f64, x: &Tensor, y: &Tensor) -> (Tensor, Tensor) {
    let (b, m) = batch_split(x);
    let scale = 2.0 * upstream / (b as f64 * m as f64);
    let mut dx = x.clone();
    let mut dy = y.clone();
    for ((dxv, dyv), (a, c)) in dx
        .data_mut()
        .iter_mut()
        .zip(dy.data_mut())
        .zip(x.data().iter().zip(y.data()))
    {
        let d = scale * (a - c);
        *dxv = d;
        *dyv = -d;
    }
    (dx, dy)
}

/// Categorical cross-entropy `-log p[label]` on softmax outputs, averaged
/// over the batch. `scores` is `(B, K)` (or `(K)` for a single sample).
pub fn cross_entropy_forward(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, k) = rows(scores)?;
    if labels.len() != b {
        return Err(Error::dimension(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let s = scores.data();
    let mut total = 0.0f64;
    for (bi, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::domain(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        total += -(s[bi * k + label].max(PROB_FLOOR)).ln();
    }
    let v = total / b as f64;
    if !v.is_finite() {
        return Err(Error::Numeric("cross entropy is not finite".to_string()));
    }
    Ok(v)
}

/// Gradient w.r.t. the (softmax) scores: `-1 / p[label]` on the label entry,
/// zero where the clamp floor took over.
pub fn cross_entropy_backward(upstream: f64, scores: &Tensor, labels: &[usize]) -> Tensor {
    let (b, k) = rows(scores).expect("validated in forward");
    let s = scores.data();
    let mut dx = Tensor::zeros(scores.shape().to_vec());
    let scale = upstream / b as f64;
    for (bi, &label) in labels.iter().enumerate() {
        let p = s[bi * k + label];
        if p > PROB_FLOOR {
            dx.data_mut()[bi * k + label] = -scale / p;
        }
    }
    dx
}

fn batch_split(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [] | [_] => (1, t.len()),
        s => (s[0], t.len() / s[0]),
    }
}

fn rows(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [k] => Ok((1, k)),
        [b, k] => Ok((b, k)),
        _ => Err(Error::dimension(format!(
            "expected rank-1 or rank-2 scores, got {:?}",
            t.shape()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::assert_close;

    #[test]
    fn mse_reference_points() {
        let x = Tensor::from_vec(vec![0.0, 2.0]);
        assert_eq!(mse_forward(&x, &x).unwrap(), 0.0);
        assert_eq!(mse_forward(&x, &Tensor::from_vec(vec![0.0, 0.0])).unwrap(), 2.0);
        assert_eq!(
            mse_forward(&Tensor::from_vec(vec![1.0]), &Tensor::from_vec(vec![0.0])).unwrap(),
            1.0
        );
    }

    #[test]
    fn mse_shape_mismatch() {
        let a = Tensor::from_vec(vec![1.0]);
        let b = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(matches!(mse_forward(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn cross_entropy_reference_points() {
        // correct class probability 1 -> 0
        let mut probs = vec![0.0; 4];
        probs[2] = 1.0;
        assert_close(
            cross_entropy_forward(&Tensor::from_vec(probs), &[2]).unwrap(),
            0.0,
            1e-12,
        );
        // uniform over 256 classes -> ln 256
        let uniform = Tensor::from_vec(vec![1.0 / 256.0; 256]);
        assert_close(cross_entropy_forward(&uniform, &[17]).unwrap(), 5.5452, 1e-4);
        // probability 0.5 -> ln 2
        let half = Tensor::from_vec(vec![0.5, 0.5]);
        assert_close(cross_entropy_forward(&half, &[0]).unwrap(), 0.6931, 1e-4);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let probs = Tensor::from_vec(vec![0.5, 0.5]);
        assert!(matches!(
            cross_entropy_forward(&probs, &[2]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn clamp_floor_keeps_loss_finite() {
        let probs = Tensor::from_vec(vec![1.0, 0.0]);
        let loss = cross_entropy_forward(&probs, &[1]).unwrap();
        assert_close(loss, -(PROB_FLOOR.ln()), 1e-9);
    }

    #[test]
    fn mse_backward_matches_finite_differences() {
        let x = Tensor::from_vec(vec![0.4, -1.2, 2.0]);
        let y = Tensor::from_vec(vec![0.1, 0.3, -0.7]);
        let (dx, dy) = mse_backward(1.0, &x, &y);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (mse_forward(&xp, &y).unwrap() - mse_forward(&xm, &y).unwrap()) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-6);
            let mut yp = y.clone();
            yp.data_mut()[i] += h;
            let mut ym = y.clone();
            ym.data_mut()[i] -= h;
            let fd = (mse_forward(&x, &yp).unwrap() - mse_forward(&x, &ym).unwrap()) / (2.0 * h);
            assert!((fd - dy.data()[i]).abs() < 1e-6);
        }
    }
}
