//! The modular network: encoder + decoder + classifier trained jointly, a
//! weight-shared truncated view for evaluation, and the block-locking
//! protocols used when a classifier is re-used across networks.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::layer::LayerKind;
use crate::module::{ModuleGraph, ModuleKind};
use crate::optim::Adam;
use crate::tape::{NodeId, ParamKey, Tape};
use crate::tensor::Tensor;

pub const ENCODER_SLOT: u8 = 0;
pub const DECODER_SLOT: u8 = 1;
pub const CLASSIFIER_SLOT: u8 = 2;

/// Number of key-byte candidates; classifiers always score all of them.
pub const KEY_CLASSES: usize = 256;

/// Which classifier blocks stay frozen while a re-used classifier trains
/// inside a new network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SharingProtocol {
    NoLock,
    /// Freeze everything up to and including Flatten.
    ConvLock,
    /// Freeze the dense block after Flatten.
    FcLock,
    /// Freeze the whole classifier.
    BothLock,
}

#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub mse: f64,
}

#[derive(Clone, Debug)]
pub struct ModularNetwork {
    pub encoder: ModuleGraph,
    pub decoder: ModuleGraph,
    pub classifier: ModuleGraph,
    pub gamma: f64,
    /// Reconstruction weight. Stored for completeness, fixed at 1.
    pub omega: f64,
    pub latent_dim: usize,
}

/// Checks latent compatibility and wires the three modules together.
pub fn assemble(
    encoder: ModuleGraph,
    decoder: ModuleGraph,
    classifier: ModuleGraph,
    gamma: f64,
) -> Result<ModularNetwork> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::domain(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    if encoder.kind != ModuleKind::Encoder
        || decoder.kind != ModuleKind::Decoder
        || classifier.kind != ModuleKind::Classifier
    {
        return Err(Error::Structure(
            "assemble expects (encoder, decoder, classifier) module kinds".to_string(),
        ));
    }
    let latent = encoder.output_len;
    for (name, got) in [("decoder", decoder.input_len), ("classifier", classifier.input_len)] {
        if got != latent {
            let _ = name;
            return Err(Error::LatentDim {
                expected: latent,
                got,
            });
        }
    }
    if decoder.output_len != encoder.input_len {
        return Err(Error::dimension(format!(
            "decoder reconstructs {} samples but traces have {}",
            decoder.output_len, encoder.input_len
        )));
    }
    if classifier.output_len != KEY_CLASSES {
        return Err(Error::dimension(format!(
            "classifier must score {KEY_CLASSES} key candidates, got {}",
            classifier.output_len
        )));
    }
    Ok(ModularNetwork {
        latent_dim: latent,
        encoder,
        decoder,
        classifier,
        gamma,
        omega: 1.0,
    })
}

/// Weight-shared view of encoder + classifier. Owns nothing; parent weight
/// updates are visible through it immediately.
pub struct TruncatedModel<'a> {
    pub encoder: &'a ModuleGraph,
    pub classifier: &'a ModuleGraph,
}

impl TruncatedModel<'_> {
    /// `(B, trace_len) -> (B, 256)` class probabilities, inference mode.
    pub fn predict(&self, traces: &Tensor) -> Result<Tensor> {
        let latent = self.encoder.infer(traces)?;
        self.classifier.infer(&latent)
    }
}

impl ModularNetwork {
    pub fn truncated(&self) -> TruncatedModel<'_> {
        TruncatedModel {
            encoder: &self.encoder,
            classifier: &self.classifier,
        }
    }

    /// Combined loss `gamma * CE + omega * MSE` in inference mode: batch
    /// norm uses running stats and nothing is mutated.
    pub fn combined_loss(&self, traces: &Tensor, labels: &[usize]) -> Result<LossBreakdown> {
        check_labels(labels)?;
        let mut tape = Tape::new();
        let x = tape.leaf(traces.clone());
        let latent = self.encoder.record_infer(&mut tape, ENCODER_SLOT, x)?;
        let recon = self.decoder.record_infer(&mut tape, DECODER_SLOT, latent)?;
        let probs = self.classifier.record_infer(&mut tape, CLASSIFIER_SLOT, latent)?;
        let (_, breakdown) = self.finish_loss(&mut tape, x, recon, probs, labels)?;
        Ok(breakdown)
    }

    /// Records the train-mode forward pass and combined loss, returning the
    /// tape for a backward pass. Batch-norm running stats update as a side
    /// effect (frozen layers excepted).
    pub fn record_train_loss(
        &mut self,
        traces: &Tensor,
        labels: &[usize],
    ) -> Result<(Tape, NodeId, LossBreakdown)> {
        check_labels(labels)?;
        let mut tape = Tape::new();
        let x = tape.leaf(traces.clone());
        let latent = self.encoder.record_train(&mut tape, ENCODER_SLOT, x)?;
        let recon = self.decoder.record_train(&mut tape, DECODER_SLOT, latent)?;
        let probs = self.classifier.record_train(&mut tape, CLASSIFIER_SLOT, latent)?;
        let (total, breakdown) = self.finish_loss(&mut tape, x, recon, probs, labels)?;
        Ok((tape, total, breakdown))
    }

    fn finish_loss(
        &self,
        tape: &mut Tape,
        x: NodeId,
        recon: NodeId,
        probs: NodeId,
        labels: &[usize],
    ) -> Result<(NodeId, LossBreakdown)> {
        let b = tape.value(x).shape()[0];
        let recon_flat = tape.reshape(recon, vec![b, self.encoder.input_len])?;
        let mse = tape.mse(recon_flat, x)?;
        let ce = tape.cross_entropy(probs, labels.to_vec())?;
        let total = tape.add_scaled(ce, mse, self.gamma, self.omega)?;
        let breakdown = LossBreakdown {
            total: tape.value(total).item(),
            ce: tape.value(ce).item(),
            mse: tape.value(mse).item(),
        };
        if !breakdown.total.is_finite() {
            return Err(Error::Numeric(format!(
                "combined loss diverged: ce={} mse={}",
                breakdown.ce, breakdown.mse
            )));
        }
        Ok((total, breakdown))
    }

    /// One optimizer step on one minibatch. Gradients are accumulated into
    /// the parameters, applied, and cleared.
    pub fn train_step(
        &mut self,
        traces: &Tensor,
        labels: &[usize],
        adam: &mut Adam,
    ) -> Result<LossBreakdown> {
        let (tape, total, breakdown) = self.record_train_loss(traces, labels)?;
        let grads = tape.backward(total)?;
        self.accumulate_grads(grads.into_params());
        adam.step(&mut [
            (ENCODER_SLOT, &mut self.encoder),
            (DECODER_SLOT, &mut self.decoder),
            (CLASSIFIER_SLOT, &mut self.classifier),
        ]);
        self.zero_grads();
        Ok(breakdown)
    }

    pub fn accumulate_grads(&mut self, grads: HashMap<ParamKey, Tensor>) {
        for (key, g) in grads {
            let module = match key.slot {
                ENCODER_SLOT => &mut self.encoder,
                DECODER_SLOT => &mut self.decoder,
                CLASSIFIER_SLOT => &mut self.classifier,
                _ => continue,
            };
            for layer in &mut module.layers {
                for p in &mut layer.params {
                    if p.id == key.id {
                        p.accumulate_grad(&g);
                    }
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.encoder.zero_grads();
        self.decoder.zero_grads();
        self.classifier.zero_grads();
    }
}

/// Applies a sharing protocol to a classifier: the selected blocks become
/// non-trainable, which also freezes batch-norm running stats inside them.
pub fn apply_lock(classifier: &mut ModuleGraph, protocol: SharingProtocol) -> Result<()> {
    if classifier.kind != ModuleKind::Classifier {
        return Err(Error::Structure(format!(
            "locks apply to classifiers, got {:?}",
            classifier.kind
        )));
    }
    if protocol == SharingProtocol::NoLock {
        for layer in &mut classifier.layers {
            layer.set_trainable(true);
        }
        return Ok(());
    }
    let flatten = classifier
        .layers
        .iter()
        .position(|l| l.spec.kind == LayerKind::Flatten);
    let has_conv = flatten.map_or(false, |f| {
        classifier.layers[..f]
            .iter()
            .any(|l| l.spec.kind == LayerKind::Conv1D)
    });
    let has_fc = flatten.map_or(false, |f| {
        classifier.layers[f + 1..]
            .iter()
            .any(|l| l.spec.kind == LayerKind::Dense)
    });
    let (lock_conv, lock_fc) = match protocol {
        SharingProtocol::ConvLock => (true, false),
        SharingProtocol::FcLock => (false, true),
        SharingProtocol::BothLock => (true, true),
        SharingProtocol::NoLock => unreachable!(),
    };
    if lock_conv && !has_conv {
        return Err(Error::Structure(
            "classifier has no convolutional block before Flatten".to_string(),
        ));
    }
    if lock_fc && !has_fc {
        return Err(Error::Structure(
            "classifier has no dense block after Flatten".to_string(),
        ));
    }
    let f = flatten.expect("checked above");
    match protocol {
        SharingProtocol::ConvLock => {
            for layer in &mut classifier.layers[..=f] {
                layer.set_trainable(false);
            }
        }
        SharingProtocol::FcLock => {
            for layer in &mut classifier.layers[f + 1..] {
                layer.set_trainable(false);
            }
        }
        SharingProtocol::BothLock => {
            for layer in &mut classifier.layers {
                layer.set_trainable(false);
            }
        }
        SharingProtocol::NoLock => unreachable!(),
    }
    Ok(())
}

/// Replaces the network's classifier with a donor. The donor's weights are
/// carried over (its experience becomes the initializer); the sharing
/// protocol then decides which of its blocks may keep learning.
pub fn swap_classifier(
    net: &mut ModularNetwork,
    donor: ModuleGraph,
    protocol: SharingProtocol,
) -> Result<()> {
    if donor.kind != ModuleKind::Classifier {
        return Err(Error::Structure(format!(
            "swap_classifier needs a classifier module, got {:?}",
            donor.kind
        )));
    }
    if donor.input_len != net.latent_dim {
        return Err(Error::LatentDim {
            expected: net.latent_dim,
            got: donor.input_len,
        });
    }
    if donor.output_len != KEY_CLASSES {
        return Err(Error::dimension(format!(
            "donor classifier scores {} candidates, need {KEY_CLASSES}",
            donor.output_len
        )));
    }
    net.classifier = donor;
    apply_lock(&mut net.classifier, protocol)
}

fn check_labels(labels: &[usize]) -> Result<()> {
    match labels.iter().find(|&&l| l >= KEY_CLASSES) {
        Some(&bad) => Err(Error::domain(format!(
            "label {bad} out of range for {KEY_CLASSES} classes"
        ))),
        None => Ok(()),
    }
}

impl std::str::FromStr for SharingProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SharingProtocol::NoLock),
            "conv" => Ok(SharingProtocol::ConvLock),
            "fc" => Ok(SharingProtocol::FcLock),
            "both" => Ok(SharingProtocol::BothLock),
            _ => Err(Error::Config(format!(
                "unknown sharing protocol '{s}' (expected none|conv|fc|both)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::{generate, GenConfig, Role};
    use crate::optim::{Adam, AdamConfig};
    use crate::presets::Arch;
    use crate::sca::Labeler;

    fn net(seed: u64) -> ModularNetwork {
        Arch::Tiny.build(100, 1e-3, seed).unwrap()
    }

    fn batch(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let set = generate(
            &GenConfig {
                key: 0x5e,
                n_traces: n,
                trace_len: 100,
                leak_positions: vec![30, 70],
                amplitude: 0.25,
                noise_sigma: 0.02,
                desync_threshold: 0,
                role: Role::Profiling,
            },
            seed,
        )
        .unwrap();
        let model = crate::sca::LeakageModel::identity(0);
        let labels = set.labels(&model).unwrap();
        (set.all(), labels)
    }

    #[test]
    fn assemble_checks_latent_and_gamma() {
        let a = net(0);
        let b = net(1);
        assert!(assemble(a.encoder.clone(), a.decoder.clone(), a.classifier.clone(), 1e-3).is_ok());
        // classifier with the wrong latent size
        let (_, _, cls_specs) = Arch::Tiny.specs(100).unwrap();
        let narrow = crate::module::build_module(&cls_specs, ModuleKind::Classifier, 32, 0).unwrap();
        assert!(matches!(
            assemble(a.encoder.clone(), a.decoder.clone(), narrow, 1e-3),
            Err(Error::LatentDim { expected: 64, got: 32 })
        ));
        assert!(matches!(
            assemble(b.encoder.clone(), b.decoder.clone(), b.classifier.clone(), 0.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            assemble(b.encoder, b.decoder, b.classifier, 1.5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn loss_total_is_the_weighted_sum() {
        let n = net(2);
        let (x, labels) = batch(8, 3);
        let loss = n.combined_loss(&x, &labels).unwrap();
        assert!((loss.total - (n.gamma * loss.ce + n.omega * loss.mse)).abs() < 1e-9);
        assert!(loss.ce > 0.0 && loss.mse > 0.0);
    }

    #[test]
    fn truncated_view_equals_composed_modules() {
        let mut n = net(4);
        let (x, labels) = batch(8, 5);
        let mut adam = Adam::new(AdamConfig::default());
        for step in 0..3 {
            let direct = n.classifier.infer(&n.encoder.infer(&x).unwrap()).unwrap();
            let via_view = n.truncated().predict(&x).unwrap();
            assert_eq!(direct.data(), via_view.data(), "diverged at step {step}");
            n.train_step(&x, &labels, &mut adam).unwrap();
        }
        // training moved the weights; the view must track them
        let after = n.truncated().predict(&x).unwrap();
        let direct = n.classifier.infer(&n.encoder.infer(&x).unwrap()).unwrap();
        assert_eq!(after.data(), direct.data());
    }

    #[test]
    fn both_lock_freezes_every_classifier_parameter() {
        let mut n = net(6);
        apply_lock(&mut n.classifier, SharingProtocol::BothLock).unwrap();
        assert!(n.classifier.layers.iter().all(|l| l.params.iter().all(|p| !p.trainable)));
        apply_lock(&mut n.classifier, SharingProtocol::NoLock).unwrap();
        assert!(n.classifier.layers.iter().all(|l| l.params.iter().all(|p| p.trainable)));
    }

    #[test]
    fn conv_lock_keeps_conv_block_bit_identical() {
        let mut n = net(7);
        apply_lock(&mut n.classifier, SharingProtocol::ConvLock).unwrap();
        let flatten = n
            .classifier
            .layers
            .iter()
            .position(|l| l.spec.kind == LayerKind::Flatten)
            .unwrap();
        let conv_before: Vec<f64> = n.classifier.layers[..=flatten]
            .iter()
            .flat_map(|l| l.params.iter().flat_map(|p| p.tensor.data().iter().copied()))
            .collect();
        let dense_before: Vec<f64> = n.classifier.layers[flatten + 1..]
            .iter()
            .flat_map(|l| l.params.iter().flat_map(|p| p.tensor.data().iter().copied()))
            .collect();
        let (x, labels) = batch(16, 8);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..10 {
            n.train_step(&x, &labels, &mut adam).unwrap();
        }
        let conv_after: Vec<f64> = n.classifier.layers[..=flatten]
            .iter()
            .flat_map(|l| l.params.iter().flat_map(|p| p.tensor.data().iter().copied()))
            .collect();
        let dense_after: Vec<f64> = n.classifier.layers[flatten + 1..]
            .iter()
            .flat_map(|l| l.params.iter().flat_map(|p| p.tensor.data().iter().copied()))
            .collect();
        assert_eq!(conv_before, conv_after);
        assert_ne!(dense_before, dense_after);
    }

    #[test]
    fn locks_need_the_block_they_reference() {
        use crate::layer::{Activation, LayerSpec};
        // dense-only classifier: no conv block, no flatten
        let specs = [LayerSpec::dense(256).with_activation(Activation::Softmax)];
        let mut cls = crate::module::build_module(&specs, ModuleKind::Classifier, 16, 0).unwrap();
        assert!(matches!(
            apply_lock(&mut cls, SharingProtocol::ConvLock),
            Err(Error::Structure(_))
        ));
        assert!(matches!(
            apply_lock(&mut cls, SharingProtocol::FcLock),
            Err(Error::Structure(_))
        ));
        assert!(apply_lock(&mut cls, SharingProtocol::NoLock).is_ok());
    }

    #[test]
    fn swap_rejects_latent_mismatch() {
        let mut a = net(9);
        let (_, _, cls_specs) = Arch::Tiny.specs(100).unwrap();
        let donor = crate::module::build_module(&cls_specs, ModuleKind::Classifier, 128, 1).unwrap();
        assert!(matches!(
            swap_classifier(&mut a, donor, SharingProtocol::FcLock),
            Err(Error::LatentDim { expected: 64, got: 128 })
        ));
    }

    #[test]
    fn swap_carries_donor_weights() {
        let mut a = net(10);
        let donor = net(11).classifier;
        let donor_weights = donor.weight_snapshot();
        swap_classifier(&mut a, donor, SharingProtocol::BothLock).unwrap();
        assert_eq!(a.classifier.weight_snapshot(), donor_weights);
        // locked donor stays bit-identical through training
        let (x, labels) = batch(16, 12);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            a.train_step(&x, &labels, &mut adam).unwrap();
        }
        assert_eq!(a.classifier.weight_snapshot(), donor_weights);
    }

    #[test]
    fn gradients_reach_the_encoder_through_a_frozen_classifier() {
        let mut n = net(13);
        apply_lock(&mut n.classifier, SharingProtocol::BothLock).unwrap();
        let (x, labels) = batch(8, 14);
        let (tape, total, _) = n.record_train_loss(&x, &labels).unwrap();
        let grads = tape.backward(total).unwrap();
        let grads = grads.into_params();
        let enc_norm: f64 = grads
            .iter()
            .filter(|(k, _)| k.slot == ENCODER_SLOT)
            .flat_map(|(_, g)| g.data().iter())
            .map(|v| v * v)
            .sum();
        assert!(enc_norm > 0.0, "encoder gradient vanished");
        assert!(grads.keys().all(|k| k.slot != CLASSIFIER_SLOT));
    }

    #[test]
    fn labels_guard_rejects_out_of_range() {
        let model = crate::sca::LeakageModel::identity(0);
        assert_eq!(model.n_candidates(), KEY_CLASSES);
        let n = net(15);
        let (x, _) = batch(4, 16);
        assert!(matches!(
            n.combined_loss(&x, &[0, 1, 2, 256]),
            Err(Error::Domain(_))
        ));
    }
}
