//! A module graph: an encoder, decoder, or classifier as an ordered layer
//! chain with bound parameters.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layer::{Activation, Layer, LayerSpec, Shape};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModuleKind {
    Encoder,
    Decoder,
    Classifier,
}

#[derive(Clone, Debug)]
pub struct ModuleGraph {
    pub kind: ModuleKind,
    pub input_len: usize,
    pub output_len: usize,
    pub layers: Vec<Layer>,
}

/// Builds a module from an ordered layer spec list, validating the shape
/// chain and initializing parameters from the seeded generator.
pub fn build_module(
    specs: &[LayerSpec],
    kind: ModuleKind,
    input_len: usize,
    seed: u64,
) -> Result<ModuleGraph> {
    let mut rng = crate::rng::seeded(seed);
    build_module_with(specs, kind, input_len, &mut rng)
}

/// Same as [`build_module`] but drawing from a caller-owned generator, so a
/// network builder can initialize several modules from one stream.
pub fn build_module_with(
    specs: &[LayerSpec],
    kind: ModuleKind,
    input_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ModuleGraph> {
    if specs.is_empty() {
        return Err(Error::dimension("module needs at least one layer".to_string()));
    }
    if input_len == 0 {
        return Err(Error::dimension("module input length must be positive".to_string()));
    }
    let mut layers = Vec::with_capacity(specs.len());
    let mut shape = Shape::Flat(input_len);
    let mut next_id = 0u32;
    for (i, spec) in specs.iter().enumerate() {
        if spec.activation == Activation::Softmax
            && !(kind == ModuleKind::Classifier && i == specs.len() - 1)
        {
            return Err(Error::domain(format!(
                "softmax is only permitted as the final classifier activation (layer {i})"
            )));
        }
        let layer = Layer::build(spec.clone(), shape, &mut next_id, rng).map_err(|e| match e {
            Error::Dimension(msg) => Error::Dimension(format!("layer {i} ({:?}): {msg}", spec.kind)),
            other => other,
        })?;
        shape = layer.out_shape;
        layers.push(layer);
    }
    Ok(ModuleGraph {
        kind,
        input_len,
        output_len: shape.elements(),
        layers,
    })
}

impl ModuleGraph {
    /// Records a training-mode forward pass for a `(B, input_len)` batch
    /// already on the tape. Updates batch-norm running stats of unfrozen
    /// layers.
    pub fn record_train(&mut self, tape: &mut Tape, slot: u8, input: NodeId) -> Result<NodeId> {
        let mut x = input;
        for layer in &mut self.layers {
            x = layer.record_train(tape, slot, x)?;
        }
        Ok(x)
    }

    /// Records an inference-mode forward pass (running stats, no updates).
    pub fn record_infer(&self, tape: &mut Tape, slot: u8, input: NodeId) -> Result<NodeId> {
        let mut x = input;
        for layer in &self.layers {
            x = layer.record_infer(tape, slot, x)?;
        }
        Ok(x)
    }

    /// Inference without a tape for a `(B, input_len)` batch; returns
    /// `(B, output_len)`.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.infer(&x)?;
        }
        let b = input.shape()[0];
        x.reshaped(vec![b, self.output_len])
    }

    /// Inference that also returns the output of layer `tap`; used for
    /// activation heatmaps.
    pub fn infer_tapped(&self, input: &Tensor, tap: usize) -> Result<(Tensor, Tensor)> {
        self.check_input(input)?;
        let mut x = input.clone();
        let mut tapped = None;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.infer(&x)?;
            if i == tap {
                tapped = Some(x.clone());
            }
        }
        let tapped = tapped.ok_or_else(|| {
            Error::Structure(format!("tap index {tap} out of range for {} layers", self.layers.len()))
        })?;
        let b = input.shape()[0];
        Ok((x.reshaped(vec![b, self.output_len])?, tapped))
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        match *input.shape() {
            [_, n] if n == self.input_len => Ok(()),
            _ => Err(Error::dimension(format!(
                "{:?} expects (batch, {}) input, got {:?}",
                self.kind,
                self.input_len,
                input.shape()
            ))),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.params.len()).sum()
    }

    /// Total number of stored parameter values.
    pub fn weight_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter())
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            for p in &mut layer.params {
                p.zero_grad();
            }
        }
    }

    /// Flat snapshot of every parameter value, in id order. Bit-comparable.
    pub fn weight_snapshot(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.weight_count());
        for layer in &self.layers {
            for p in &layer.params {
                out.extend_from_slice(p.tensor.data());
            }
        }
        out
    }
}
