//! Similarity analysis between trained classifiers: first-layer activation
//! heatmaps, input-gradient saliency, and DTW distance between saliency
//! signals.

use crate::error::{Error, Result};
use crate::layer::LayerKind;
use crate::module::{ModuleGraph, ModuleKind};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Mean absolute input gradient per latent feature; what the gradient
/// visualization plots.
#[derive(Clone, Debug)]
pub struct SaliencyProfile {
    pub values: Vec<f64>,
}

/// Mean absolute activation of the classifier's first convolutional layer,
/// per kernel per output position, averaged over the batch. Returns a
/// `(kernels, positions)` grid.
pub fn activation_heatmap(classifier: &ModuleGraph, latent: &Tensor) -> Result<Tensor> {
    let conv_idx = classifier
        .layers
        .iter()
        .position(|l| l.spec.kind == LayerKind::Conv1D)
        .ok_or_else(|| Error::Structure("classifier has no convolutional layer".to_string()))?;
    let b = batch_size(latent)?;
    let (_, tapped) = classifier.infer_tapped(latent, conv_idx)?;
    let (kernels, positions) = match *tapped.shape() {
        [_, c, l] => (c, l),
        _ => unreachable!("conv output is rank 3"),
    };
    let mut grid = vec![0.0f64; kernels * positions];
    for bi in 0..b {
        for k in 0..kernels {
            for t in 0..positions {
                grid[k * positions + t] += tapped.data()[(bi * kernels + k) * positions + t].abs();
            }
        }
    }
    for v in &mut grid {
        *v /= b as f64;
    }
    Tensor::new(vec![kernels, positions], grid)
}

/// Backpropagates the cross-entropy loss of a trained classifier to its
/// input and reports the per-position mean absolute gradient.
pub fn saliency(classifier: &ModuleGraph, latent: &Tensor, labels: &[usize]) -> Result<SaliencyProfile> {
    if classifier.kind != ModuleKind::Classifier {
        return Err(Error::Structure(format!(
            "saliency runs on classifiers, got {:?}",
            classifier.kind
        )));
    }
    let b = batch_size(latent)?;
    if labels.len() != b {
        return Err(Error::dimension(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf_grad(latent.clone());
    let probs = classifier.record_infer(&mut tape, 0, x)?;
    let loss = tape.cross_entropy(probs, labels.to_vec())?;
    let grads = tape.backward(loss)?;
    let gx = grads
        .node(x)
        .ok_or_else(|| Error::Structure("loss is disconnected from the input".to_string()))?;

    // the batch-mean CE puts a 1/B factor on every row's gradient, so the
    // plain sum over rows is exactly the batch mean of per-sample
    // |d(-log p_i)/dx_i| — duplicated rows leave it unchanged
    let n = classifier.input_len;
    let mut values = vec![0.0f64; n];
    for bi in 0..b {
        for i in 0..n {
            values[i] += gx.data()[bi * n + i].abs();
        }
    }
    Ok(SaliencyProfile { values })
}

/// Classic dynamic time warping with absolute-difference local cost, full
/// window, and symmetric steps (match, insert, delete). Returns the optimal
/// alignment cost.
pub fn dtw_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("dtw needs non-empty sequences".to_string()));
    }
    let (n, m) = (a.len(), b.len());
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut curr = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        curr[0] = f64::INFINITY;
        for j in 1..=m {
            let cost = (a[i - 1] - b[j - 1]).abs();
            curr[j] = cost + prev[j].min(curr[j - 1]).min(prev[j - 1]);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m])
}

fn batch_size(latent: &Tensor) -> Result<usize> {
    match *latent.shape() {
        [b, _] if b > 0 => Ok(b),
        _ => Err(Error::dimension(format!(
            "expected a non-empty (batch, features) tensor, got {:?}",
            latent.shape()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{Activation, LayerSpec};
    use crate::module::build_module;

    fn toy_classifier(seed: u64) -> ModuleGraph {
        let specs = [
            LayerSpec::conv1d(2, 3).with_activation(Activation::Selu),
            LayerSpec::avg_pool(2, 2),
            LayerSpec::flatten(),
            LayerSpec::dense(4).with_activation(Activation::Softmax),
        ];
        build_module(&specs, ModuleKind::Classifier, 8, seed).unwrap()
    }

    #[test]
    fn zero_weight_conv_gives_zero_heatmap() {
        let mut cls = toy_classifier(0);
        for v in cls.layers[0].params[0].tensor.data_mut() {
            *v = 0.0;
        }
        let latent = Tensor::new(vec![3, 8], (0..24).map(|i| i as f64 * 0.1).collect()).unwrap();
        let grid = activation_heatmap(&cls, &latent).unwrap();
        assert!(grid.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_heatmap_of_ones() {
        let specs = [
            LayerSpec::conv1d(1, 1),
            LayerSpec::flatten(),
            LayerSpec::dense(4).with_activation(Activation::Softmax),
        ];
        let mut cls = build_module(&specs, ModuleKind::Classifier, 6, 0).unwrap();
        cls.layers[0].params[0].tensor.data_mut()[0] = 1.0;
        let latent = Tensor::new(vec![2, 6], vec![1.0; 12]).unwrap();
        let grid = activation_heatmap(&cls, &latent).unwrap();
        assert_eq!(grid.shape(), &[1, 6]);
        assert!(grid.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn heatmap_matches_per_sample_recomputation() {
        let cls = toy_classifier(7);
        let latent = Tensor::new(vec![4, 8], (0..32).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.3).collect()).unwrap();
        let grid = activation_heatmap(&cls, &latent).unwrap();
        // recompute one sample at a time and average by hand
        let mut want = vec![0.0f64; grid.len()];
        for bi in 0..4 {
            let row = Tensor::new(vec![1, 8], latent.data()[bi * 8..(bi + 1) * 8].to_vec()).unwrap();
            let (_, tapped) = cls.infer_tapped(&row, 0).unwrap();
            for (w, &v) in want.iter_mut().zip(tapped.data()) {
                *w += v.abs() / 4.0;
            }
        }
        for (a, b) in grid.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn heatmap_requires_a_conv_layer() {
        let specs = [LayerSpec::dense(4).with_activation(Activation::Softmax)];
        let cls = build_module(&specs, ModuleKind::Classifier, 8, 0).unwrap();
        let latent = Tensor::new(vec![1, 8], vec![0.5; 8]).unwrap();
        assert!(matches!(
            activation_heatmap(&cls, &latent),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn disconnected_input_position_has_zero_saliency() {
        // single dense layer; zero out the weight column of position 2
        let specs = [LayerSpec::dense(4).with_activation(Activation::Softmax)];
        let mut cls = build_module(&specs, ModuleKind::Classifier, 5, 1).unwrap();
        {
            let w = cls.layers[0].params[0].tensor.data_mut();
            for u in 0..4 {
                w[u * 5 + 2] = 0.0;
            }
        }
        let latent = Tensor::new(vec![3, 5], (0..15).map(|i| (i as f64).cos()).collect()).unwrap();
        let prof = saliency(&cls, &latent, &[0, 1, 3]).unwrap();
        assert_eq!(prof.values[2], 0.0);
        assert!(prof.values.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn saliency_matches_finite_differences() {
        let cls = toy_classifier(3);
        let latent = Tensor::new(vec![2, 8], (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let labels = [1usize, 2];
        // finite differences of the batch-mean CE loss w.r.t. each input
        let loss = |x: &Tensor| -> f64 {
            let probs = cls.infer(x).unwrap();
            crate::ops::cross_entropy_forward(&probs, &labels).unwrap()
        };
        let mut tape = Tape::new();
        let x = tape.leaf_grad(latent.clone());
        let probs = cls.record_infer(&mut tape, 0, x).unwrap();
        let l = tape.cross_entropy(probs, labels.to_vec()).unwrap();
        let grads = tape.backward(l).unwrap();
        let gx = grads.node(x).unwrap();
        let h = 1e-6;
        for i in 0..16 {
            let mut xp = latent.clone();
            xp.data_mut()[i] += h;
            let mut xm = latent.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!(
                (fd - gx.data()[i]).abs() < 1e-6,
                "input {i}: fd {fd} vs analytic {}",
                gx.data()[i]
            );
        }
        // per-sample gradients are B times the batch-mean-loss gradients, so
        // the batch mean of their magnitudes is the plain sum over rows
        let prof = saliency(&cls, &latent, &labels).unwrap();
        for i in 0..8 {
            let want = gx.data()[i].abs() + gx.data()[8 + i].abs();
            assert!((prof.values[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_batch_rows_leave_mean_unchanged() {
        let cls = toy_classifier(5);
        let row: Vec<f64> = (0..8).map(|i| (i as f64 * 0.21).cos()).collect();
        let single = Tensor::new(vec![1, 8], row.clone()).unwrap();
        let doubled = Tensor::new(vec![2, 8], [row.clone(), row].concat()).unwrap();
        let a = saliency(&cls, &single, &[2]).unwrap();
        let b = saliency(&cls, &doubled, &[2, 2]).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dtw_reference_points() {
        let s = [0.4, 1.0, -2.0, 0.0];
        assert_eq!(dtw_distance(&s, &s).unwrap(), 0.0);
        assert_eq!(dtw_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(dtw_distance(&[0.0], &[3.0]).unwrap(), 3.0);
        assert!(matches!(dtw_distance(&[], &[1.0]), Err(Error::Data(_))));
    }

    #[test]
    fn dtw_is_symmetric() {
        let a = [0.1, 0.9, 0.4, 0.4, 2.0];
        let b = [1.0, 0.2, 0.3];
        assert_eq!(dtw_distance(&a, &b).unwrap(), dtw_distance(&b, &a).unwrap());
    }
}
