//! Ready-made architectures.
//!
//! `Table2` is the full-scale layout used against the ASCAD captures;
//! `Tiny` is a scaled-down variant for synthetic desk-scale experiments.
//! Both keep the same structure: a dilated first conv block, VGG-style
//! kernel doubling, average pooling, a dense latent layer, a mirrored
//! transposed-conv decoder, and a shallow classifier.

use crate::error::{Error, Result};
use crate::layer::{Activation, LayerSpec};
use crate::module::{build_module_with, ModuleKind};
use crate::network::{assemble, ModularNetwork};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    /// Full-scale preset: latent 300, dilated 64-tap first conv.
    Table2 {
        /// Adds one extra conv block (128 kernels, length 3, no pooling) to
        /// the encoder tail and a matching stride-1 transposed block to the
        /// decoder head; used for the longer random-key captures.
        extra_block: bool,
    },
    /// Desk-scale preset: latent 64, small kernels, fast to train.
    Tiny,
}

impl Arch {
    pub fn latent_dim(&self) -> usize {
        match self {
            Arch::Table2 { .. } => 300,
            Arch::Tiny => 64,
        }
    }

    /// Layer specs for (encoder, decoder, classifier) at `input_len` samples.
    pub fn specs(&self, input_len: usize) -> Result<(Vec<LayerSpec>, Vec<LayerSpec>, Vec<LayerSpec>)> {
        match *self {
            Arch::Table2 { extra_block } => table2_specs(input_len, extra_block),
            Arch::Tiny => tiny_specs(input_len),
        }
    }

    /// Builds and assembles the whole network with one seed.
    pub fn build(&self, input_len: usize, gamma: f64, seed: u64) -> Result<ModularNetwork> {
        let (enc, dec, cls) = self.specs(input_len)?;
        let mut rng = crate::rng::seeded(seed);
        let encoder = build_module_with(&enc, ModuleKind::Encoder, input_len, &mut rng)?;
        let decoder = build_module_with(&dec, ModuleKind::Decoder, self.latent_dim(), &mut rng)?;
        let classifier = build_module_with(&cls, ModuleKind::Classifier, self.latent_dim(), &mut rng)?;
        assemble(encoder, decoder, classifier, gamma)
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table2" => Ok(Arch::Table2 { extra_block: false }),
            "table2-extra" => Ok(Arch::Table2 { extra_block: true }),
            "tiny" => Ok(Arch::Tiny),
            _ => Err(Error::Config(format!(
                "unknown architecture '{s}' (expected table2|table2-extra|tiny)"
            ))),
        }
    }
}

fn table2_specs(
    input_len: usize,
    extra_block: bool,
) -> Result<(Vec<LayerSpec>, Vec<LayerSpec>, Vec<LayerSpec>)> {
    let mut encoder = vec![
        LayerSpec::conv1d(32, 64).with_dilation(3).with_activation(Activation::Selu),
        LayerSpec::batch_norm(),
        LayerSpec::avg_pool(2, 2),
        LayerSpec::conv1d(64, 25).with_activation(Activation::Selu),
        LayerSpec::batch_norm(),
        LayerSpec::avg_pool(25, 25),
        LayerSpec::conv1d(128, 3).with_activation(Activation::Selu),
        LayerSpec::batch_norm(),
        LayerSpec::avg_pool(5, 5),
    ];
    if extra_block {
        encoder.push(LayerSpec::conv1d(128, 3).with_activation(Activation::Selu));
        encoder.push(LayerSpec::batch_norm());
    }
    encoder.push(LayerSpec::flatten());
    encoder.push(LayerSpec::dense(300));

    // Decoder transposed convolutions multiply the length by their stride
    // (same padding), so the reshape length is fixed by the trace length.
    let stride_product = 7 * 25 * 2;
    if input_len % stride_product != 0 {
        return Err(Error::Config(format!(
            "table2 decoder upsamples by {stride_product}; trace length {input_len} is not divisible"
        )));
    }
    let dec_len0 = input_len / stride_product;
    let mut decoder = vec![
        LayerSpec::dense(128 * dec_len0).with_activation(Activation::Selu),
        LayerSpec::reshape(128),
    ];
    if extra_block {
        decoder.push(LayerSpec::tconv1d(128, 3, 1).with_activation(Activation::Selu));
        decoder.push(LayerSpec::batch_norm());
    }
    decoder.extend([
        LayerSpec::tconv1d(128, 3, 7).with_activation(Activation::Selu),
        LayerSpec::batch_norm(),
        LayerSpec::tconv1d(64, 25, 25).with_activation(Activation::Selu),
        LayerSpec::batch_norm(),
        LayerSpec::tconv1d(32, 64, 2).with_activation(Activation::Selu),
        LayerSpec::batch_norm(),
        LayerSpec::tconv1d(1, 1, 1).with_activation(Activation::Sigmoid),
    ]);

    let classifier = vec![
        LayerSpec::conv1d(4, 1).with_dilation(3).with_activation(Activation::Selu),
        LayerSpec::batch_norm(),
        LayerSpec::avg_pool(2, 2),
        LayerSpec::flatten(),
        LayerSpec::dense(10).with_activation(Activation::Selu),
        LayerSpec::dense(10).with_activation(Activation::Selu),
        LayerSpec::dense(10).with_activation(Activation::Selu),
        LayerSpec::dense(256).with_activation(Activation::Softmax),
    ];
    Ok((encoder, decoder, classifier))
}

fn tiny_specs(input_len: usize) -> Result<(Vec<LayerSpec>, Vec<LayerSpec>, Vec<LayerSpec>)> {
    let encoder = vec![
        LayerSpec::conv1d(8, 16).with_dilation(2).with_activation(Activation::Selu),
        LayerSpec::batch_norm(),
        LayerSpec::avg_pool(4, 4),
        LayerSpec::conv1d(8, 8).with_activation(Activation::Selu),
        LayerSpec::batch_norm(),
        LayerSpec::avg_pool(4, 4),
        LayerSpec::flatten(),
        LayerSpec::dense(64),
    ];

    let stride_product = 5 * 5;
    if input_len % stride_product != 0 {
        return Err(Error::Config(format!(
            "tiny decoder upsamples by {stride_product}; trace length {input_len} is not divisible"
        )));
    }
    let dec_len0 = input_len / stride_product;
    let decoder = vec![
        LayerSpec::dense(8 * dec_len0).with_activation(Activation::Selu),
        LayerSpec::reshape(8),
        LayerSpec::tconv1d(4, 5, 5).with_activation(Activation::Selu),
        LayerSpec::batch_norm(),
        LayerSpec::tconv1d(1, 5, 5).with_activation(Activation::Sigmoid),
    ];

    let classifier = vec![
        LayerSpec::conv1d(4, 1).with_activation(Activation::Selu),
        LayerSpec::batch_norm(),
        LayerSpec::avg_pool(2, 2),
        LayerSpec::flatten(),
        LayerSpec::dense(32).with_activation(Activation::Selu),
        LayerSpec::dense(256).with_activation(Activation::Softmax),
    ];
    Ok((encoder, decoder, classifier))
}
