//! Layer specifications and their bound (parameterized) instances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{self, PadMode, BN_MOMENTUM};
use crate::tape::{NodeId, Tape};
use crate::tensor::{ParamId, Parameter, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Selu,
    Sigmoid,
    Softmax,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    HeUniform,
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv1D,
    TransposedConv1D,
    AvgPool1D,
    Dense,
    BatchNorm,
    Flatten,
    Activation,
    /// Folds a flat vector into `(channels, len / channels)` so transposed
    /// convolutions can consume a dense layer's output. Inverse of Flatten.
    Reshape,
}

/// Hyperparameters of one layer. Unused fields for a given kind keep their
/// defaults; `kernel_len` doubles as the pool window for `AvgPool1D`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel_count: usize,
    pub kernel_len: usize,
    pub dilation_rate: usize,
    pub stride: usize,
    pub units: usize,
    pub channels: usize,
    pub activation: Activation,
    pub padding: PadMode,
    pub init: Init,
}

impl Default for LayerSpec {
    fn default() -> Self {
        LayerSpec {
            kind: LayerKind::Flatten,
            kernel_count: 1,
            kernel_len: 1,
            dilation_rate: 1,
            stride: 1,
            units: 1,
            channels: 1,
            activation: Activation::None,
            padding: PadMode::Same,
            init: Init::HeUniform,
        }
    }
}

impl LayerSpec {
    pub fn conv1d(kernel_count: usize, kernel_len: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv1D,
            kernel_count,
            kernel_len,
            ..Default::default()
        }
    }

    pub fn tconv1d(kernel_count: usize, kernel_len: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::TransposedConv1D,
            kernel_count,
            kernel_len,
            stride,
            ..Default::default()
        }
    }

    pub fn avg_pool(pool: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::AvgPool1D,
            kernel_len: pool,
            stride,
            ..Default::default()
        }
    }

    pub fn dense(units: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            units,
            ..Default::default()
        }
    }

    pub fn batch_norm() -> Self {
        LayerSpec {
            kind: LayerKind::BatchNorm,
            ..Default::default()
        }
    }

    pub fn flatten() -> Self {
        LayerSpec {
            kind: LayerKind::Flatten,
            ..Default::default()
        }
    }

    pub fn activation(a: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Activation,
            activation: a,
            ..Default::default()
        }
    }

    pub fn reshape(channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Reshape,
            channels,
            ..Default::default()
        }
    }

    pub fn with_dilation(mut self, dr: usize) -> Self {
        self.dilation_rate = dr;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    pub fn with_padding(mut self, p: PadMode) -> Self {
        self.padding = p;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.dilation_rate == 0 || self.stride == 0 || self.kernel_len == 0 {
            return Err(Error::domain(format!(
                "layer hyperparameters must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Activation-agnostic shape of a value flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    Spatial { channels: usize, len: usize },
}

impl Shape {
    pub fn elements(&self) -> usize {
        match *self {
            Shape::Flat(n) => n,
            Shape::Spatial { channels, len } => channels * len,
        }
    }

    /// Conv layers read flat vectors as single-channel signals.
    fn as_spatial(&self) -> (usize, usize) {
        match *self {
            Shape::Flat(n) => (1, n),
            Shape::Spatial { channels, len } => (channels, len),
        }
    }

    /// Tensor shape for a batch of `b` values.
    pub fn batched(&self, b: usize) -> Vec<usize> {
        match *self {
            Shape::Flat(n) => vec![b, n],
            Shape::Spatial { channels, len } => vec![b, channels, len],
        }
    }
}

/// Exponential-moving-average statistics owned by a BatchNorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A layer spec bound to its parameters and shapes.
#[derive(Clone, Debug)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Parameter>,
    pub running: Option<RunningStats>,
    pub in_shape: Shape,
    pub out_shape: Shape,
}

impl Layer {
    /// Output shape of `spec` applied to `in_shape`, or the shape error that
    /// makes the chain invalid.
    pub fn infer_shape(spec: &LayerSpec, in_shape: Shape) -> Result<Shape> {
        spec.validate()?;
        match spec.kind {
            LayerKind::Conv1D => {
                let (_, len) = in_shape.as_spatial();
                let lo = ops::conv1d_out_len(
                    len,
                    spec.kernel_len,
                    spec.dilation_rate,
                    spec.stride,
                    spec.padding,
                )?;
                Ok(Shape::Spatial {
                    channels: spec.kernel_count,
                    len: lo,
                })
            }
            LayerKind::TransposedConv1D => {
                let (_, len) = in_shape.as_spatial();
                let lo = ops::tconv1d_out_len(
                    len,
                    spec.kernel_len,
                    spec.stride,
                    spec.padding == PadMode::Same,
                );
                Ok(Shape::Spatial {
                    channels: spec.kernel_count,
                    len: lo,
                })
            }
            LayerKind::AvgPool1D => {
                let (c, len) = in_shape.as_spatial();
                let lo = ops::avg_pool1d_out_len(len, spec.kernel_len, spec.stride)?;
                Ok(Shape::Spatial { channels: c, len: lo })
            }
            LayerKind::Dense => match in_shape {
                Shape::Flat(_) => Ok(Shape::Flat(spec.units)),
                Shape::Spatial { .. } => Err(Error::dimension(
                    "dense layer needs a flat input; add a Flatten layer first".to_string(),
                )),
            },
            LayerKind::BatchNorm | LayerKind::Activation => Ok(in_shape),
            LayerKind::Flatten => Ok(Shape::Flat(in_shape.elements())),
            LayerKind::Reshape => {
                let n = in_shape.elements();
                if spec.channels == 0 || n % spec.channels != 0 {
                    return Err(Error::dimension(format!(
                        "cannot reshape {n} values into {} channels",
                        spec.channels
                    )));
                }
                Ok(Shape::Spatial {
                    channels: spec.channels,
                    len: n / spec.channels,
                })
            }
        }
    }

    /// Binds `spec` at `in_shape`, drawing fresh parameters from `rng`.
    /// Parameter ids start at `next_id` and are handed out in a fixed order.
    pub fn build(
        spec: LayerSpec,
        in_shape: Shape,
        next_id: &mut u32,
        rng: &mut ChaCha8Rng,
    ) -> Result<Layer> {
        let out_shape = Self::infer_shape(&spec, in_shape)?;
        let mut take_id = || {
            let id = ParamId(*next_id);
            *next_id += 1;
            id
        };
        let mut params = Vec::new();
        let mut running = None;
        match spec.kind {
            LayerKind::Conv1D => {
                let (ci, _) = in_shape.as_spatial();
                let shape = vec![spec.kernel_count, ci, spec.kernel_len];
                let fan_in = ci * spec.kernel_len;
                params.push(Parameter::new(take_id(), init_tensor(shape, spec.init, fan_in, rng)));
                params.push(Parameter::new(take_id(), Tensor::zeros(vec![spec.kernel_count])));
            }
            LayerKind::TransposedConv1D => {
                let (ci, _) = in_shape.as_spatial();
                // kernel layout (in_ch, out_ch, k): the adjoint of a conv
                // whose kernels are (in_ch, out_ch, k)
                let shape = vec![ci, spec.kernel_count, spec.kernel_len];
                let fan_in = ci * spec.kernel_len;
                params.push(Parameter::new(take_id(), init_tensor(shape, spec.init, fan_in, rng)));
                params.push(Parameter::new(take_id(), Tensor::zeros(vec![spec.kernel_count])));
            }
            LayerKind::Dense => {
                let f = in_shape.elements();
                let shape = vec![spec.units, f];
                params.push(Parameter::new(take_id(), init_tensor(shape, spec.init, f, rng)));
                params.push(Parameter::new(take_id(), Tensor::zeros(vec![spec.units])));
            }
            LayerKind::BatchNorm => {
                let c = match in_shape {
                    Shape::Flat(n) => n,
                    Shape::Spatial { channels, .. } => channels,
                };
                params.push(Parameter::new(take_id(), Tensor::new(vec![c], vec![1.0; c])?));
                params.push(Parameter::new(take_id(), Tensor::zeros(vec![c])));
                running = Some(RunningStats {
                    mean: vec![0.0; c],
                    var: vec![1.0; c],
                });
            }
            LayerKind::AvgPool1D | LayerKind::Flatten | LayerKind::Activation | LayerKind::Reshape => {}
        }
        Ok(Layer {
            spec,
            params,
            running,
            in_shape,
            out_shape,
        })
    }

    /// All parameters of this layer share one trainable state; locks flip
    /// whole blocks at a time.
    pub fn trainable(&self) -> bool {
        self.params.iter().all(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Records this layer on the tape in training mode. Batch norm layers
    /// normalize by batch statistics and, unless frozen, fold them into
    /// their running stats.
    pub fn record_train(&mut self, tape: &mut Tape, slot: u8, input: NodeId) -> Result<NodeId> {
        let x = self.lift(tape, input)?;
        let out = match self.spec.kind {
            LayerKind::BatchNorm => {
                let gamma = tape.param(slot, &self.params[0]);
                let beta = tape.param(slot, &self.params[1]);
                let (out, cache) = tape.batch_norm_train(x, gamma, beta)?;
                if self.trainable() {
                    // stats stay on the f32 grid so the 32-bit container
                    // round-trips losslessly
                    let stats = self.running.as_mut().expect("bn layer has running stats");
                    for (r, b) in stats.mean.iter_mut().zip(&cache.mean) {
                        *r = (BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b) as f32 as f64;
                    }
                    for (r, b) in stats.var.iter_mut().zip(&cache.var) {
                        *r = (BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b) as f32 as f64;
                    }
                }
                out
            }
            _ => self.record_common(tape, slot, x)?,
        };
        self.finish(tape, out)
    }

    /// Records this layer on the tape in inference mode (running statistics,
    /// no state updates). Gradients still flow; saliency uses this.
    pub fn record_infer(&self, tape: &mut Tape, slot: u8, input: NodeId) -> Result<NodeId> {
        let x = self.lift(tape, input)?;
        let out = match self.spec.kind {
            LayerKind::BatchNorm => {
                let gamma = tape.param(slot, &self.params[0]);
                let beta = tape.param(slot, &self.params[1]);
                let stats = self.running.as_ref().expect("bn layer has running stats");
                tape.batch_norm_infer(x, gamma, beta, &stats.mean, &stats.var)?
            }
            _ => self.record_common(tape, slot, x)?,
        };
        self.finish(tape, out)
    }

    fn record_common(&self, tape: &mut Tape, slot: u8, x: NodeId) -> Result<NodeId> {
        match self.spec.kind {
            LayerKind::Conv1D => {
                let w = tape.param(slot, &self.params[0]);
                let b = tape.param(slot, &self.params[1]);
                tape.conv1d(
                    x,
                    w,
                    b,
                    self.spec.dilation_rate,
                    self.spec.stride,
                    self.spec.padding,
                )
            }
            LayerKind::TransposedConv1D => {
                let w = tape.param(slot, &self.params[0]);
                let b = tape.param(slot, &self.params[1]);
                tape.tconv1d(x, w, b, self.spec.stride, self.spec.padding == PadMode::Same)
            }
            LayerKind::AvgPool1D => tape.avg_pool1d(x, self.spec.kernel_len, self.spec.stride),
            LayerKind::Dense => {
                let w = tape.param(slot, &self.params[0]);
                let b = tape.param(slot, &self.params[1]);
                tape.dense(x, w, b)
            }
            LayerKind::Flatten | LayerKind::Reshape => {
                let b = tape.value(x).shape()[0];
                tape.reshape(x, self.out_shape.batched(b))
            }
            LayerKind::Activation => Ok(x),
            LayerKind::BatchNorm => unreachable!("handled by mode-specific path"),
        }
    }

    /// Reshapes the incoming node to this layer's expected batched shape
    /// (e.g. lifting a flat vector to single-channel spatial form).
    fn lift(&self, tape: &mut Tape, input: NodeId) -> Result<NodeId> {
        let b = tape.value(input).shape()[0];
        let want = match self.spec.kind {
            LayerKind::Conv1D | LayerKind::TransposedConv1D | LayerKind::AvgPool1D => {
                let (c, l) = self.in_shape.as_spatial();
                vec![b, c, l]
            }
            _ => self.in_shape.batched(b),
        };
        if tape.value(input).shape() == want.as_slice() {
            Ok(input)
        } else {
            tape.reshape(input, want)
        }
    }

    fn finish(&self, tape: &mut Tape, out: NodeId) -> Result<NodeId> {
        match self.spec.activation {
            Activation::None => Ok(out),
            Activation::Selu => Ok(tape.selu(out)),
            Activation::Sigmoid => Ok(tape.sigmoid(out)),
            Activation::Softmax => {
                // softmax runs on (B, K) rows
                let shape = tape.value(out).shape().to_vec();
                let flat = if shape.len() == 2 {
                    out
                } else {
                    let b = shape[0];
                    let k = shape.iter().skip(1).product();
                    tape.reshape(out, vec![b, k])?
                };
                tape.softmax(flat)
            }
        }
    }

    /// Pure inference without a tape: same math as `record_infer`.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let b = input.shape()[0];
        let x = {
            let want = match self.spec.kind {
                LayerKind::Conv1D | LayerKind::TransposedConv1D | LayerKind::AvgPool1D => {
                    let (c, l) = self.in_shape.as_spatial();
                    vec![b, c, l]
                }
                _ => self.in_shape.batched(b),
            };
            if input.shape() == want.as_slice() {
                input.clone()
            } else {
                input.reshaped(want)?
            }
        };
        let out = match self.spec.kind {
            LayerKind::Conv1D => ops::conv1d_forward(
                &x,
                &self.params[0].tensor,
                &self.params[1].tensor,
                self.spec.dilation_rate,
                self.spec.stride,
                self.spec.padding,
            )?,
            LayerKind::TransposedConv1D => ops::tconv1d_forward(
                &x,
                &self.params[0].tensor,
                &self.params[1].tensor,
                self.spec.stride,
                self.spec.padding == PadMode::Same,
            )?,
            LayerKind::AvgPool1D => {
                ops::avg_pool1d_forward(&x, self.spec.kernel_len, self.spec.stride)?
            }
            LayerKind::Dense => {
                ops::dense_forward(&x, &self.params[0].tensor, &self.params[1].tensor)?
            }
            LayerKind::BatchNorm => {
                let stats = self.running.as_ref().expect("bn layer has running stats");
                ops::batch_norm_infer(
                    &x,
                    &self.params[0].tensor,
                    &self.params[1].tensor,
                    &stats.mean,
                    &stats.var,
                )?
            }
            LayerKind::Flatten | LayerKind::Reshape => x.reshaped(self.out_shape.batched(b))?,
            LayerKind::Activation => x,
        };
        match self.spec.activation {
            Activation::None => Ok(out),
            Activation::Selu => Ok(ops::selu_forward(&out)),
            Activation::Sigmoid => Ok(ops::sigmoid_forward(&out)),
            Activation::Softmax => {
                let shape = out.shape().to_vec();
                let flat = if shape.len() == 2 {
                    out
                } else {
                    let k = shape.iter().skip(1).product();
                    out.reshaped(vec![b, k])?
                };
                ops::softmax_forward(&flat)
            }
        }
    }
}

fn init_tensor(shape: Vec<usize>, init: Init, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Zeros => vec![0.0; n],
        Init::HeUniform => {
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        }
    };
    Tensor::new(shape, data).expect("constructed shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_chain_through_conv_and_pool() {
        let s = Layer::infer_shape(&LayerSpec::conv1d(32, 64).with_dilation(3), Shape::Flat(700)).unwrap();
        assert_eq!(s, Shape::Spatial { channels: 32, len: 700 });
        let s = Layer::infer_shape(&LayerSpec::avg_pool(2, 2), s).unwrap();
        assert_eq!(s, Shape::Spatial { channels: 32, len: 350 });
    }

    #[test]
    fn dense_rejects_spatial_input() {
        let err = Layer::infer_shape(&LayerSpec::dense(10), Shape::Spatial { channels: 2, len: 5 });
        assert!(err.is_err());
    }

    #[test]
    fn reshape_needs_divisible_channels() {
        assert!(Layer::infer_shape(&LayerSpec::reshape(3), Shape::Flat(10)).is_err());
        assert_eq!(
            Layer::infer_shape(&LayerSpec::reshape(2), Shape::Flat(10)).unwrap(),
            Shape::Spatial { channels: 2, len: 5 }
        );
    }

    #[test]
    fn he_uniform_respects_bound() {
        let mut rng = crate::rng::seeded(1);
        let mut next = 0;
        let layer = Layer::build(LayerSpec::conv1d(4, 8), Shape::Flat(32), &mut next, &mut rng).unwrap();
        let bound = (6.0f64 / 8.0).sqrt();
        for &v in layer.params[0].tensor.data() {
            assert!(v.abs() <= bound);
        }
        // bias starts at zero
        assert!(layer.params[1].tensor.data().iter().all(|&v| v == 0.0));
        assert_eq!(next, 2);
    }
}
