//! Reverse-mode differentiation over a recorded forward pass.
//!
//! A [`Tape`] is built for one forward/backward cycle: record the ops, call
//! [`Tape::backward`] on the scalar loss, read the parameter gradients out of
//! the returned [`Gradients`], drop the tape. Parameter values are snapshotted
//! into the tape at record time, so the modules stay borrowable while the
//! tape is alive.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::ops::{BatchNormCache, PadMode};
use crate::tensor::{ParamId, Parameter, Tensor};

/// Index of a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Identifies a parameter across the modules participating in one tape:
/// `slot` names the module (encoder/decoder/classifier), `id` the parameter
/// within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub slot: u8,
    pub id: ParamId,
}

enum Op {
    Leaf {
        keep_grad: bool,
    },
    Param {
        key: ParamKey,
        trainable: bool,
    },
    Conv1d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        dilation: usize,
        stride: usize,
        pad: PadMode,
    },
    TConv1d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        same: bool,
    },
    AvgPool {
        input: NodeId,
        pool: usize,
        stride: usize,
    },
    Dense {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
    },
    BatchNormTrain {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: BatchNormCache,
    },
    BatchNormInfer {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Selu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    Softmax {
        input: NodeId,
    },
    Reshape {
        input: NodeId,
    },
    Mse {
        a: NodeId,
        b: NodeId,
    },
    CrossEntropy {
        scores: NodeId,
        labels: Vec<usize>,
    },
    /// `ca * a + cb * b` on scalars; combines the two loss terms.
    AddScaled {
        a: NodeId,
        b: NodeId,
        ca: f64,
        cb: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass: gradients for trainable parameters plus, on
/// request, gradients at `leaf_grad` inputs.
pub struct Gradients {
    params: HashMap<ParamKey, Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        self.params.get(&key)
    }

    pub fn into_params(self) -> HashMap<ParamKey, Tensor> {
        self.params
    }

    /// Gradient at any recorded node (e.g. a `leaf_grad` input).
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an input that does not need a gradient.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { keep_grad: false })
    }

    /// Records an input whose gradient should be retained (saliency).
    pub fn leaf_grad(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { keep_grad: true })
    }

    /// Snapshots a parameter's current values onto the tape.
    pub fn param(&mut self, slot: u8, p: &Parameter) -> NodeId {
        self.push(
            p.tensor.clone(),
            Op::Param {
                key: ParamKey { slot, id: p.id },
                trainable: p.trainable,
            },
        )
    }

    pub fn conv1d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        dilation: usize,
        stride: usize,
        pad: PadMode,
    ) -> Result<NodeId> {
        let out = ops::conv1d_forward(
            self.value(input),
            self.value(kernels),
            self.value(bias),
            dilation,
            stride,
            pad,
        )?;
        Ok(self.push(
            out,
            Op::Conv1d {
                input,
                kernels,
                bias,
                dilation,
                stride,
                pad,
            },
        ))
    }

    pub fn tconv1d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        same: bool,
    ) -> Result<NodeId> {
        let out = ops::tconv1d_forward(
            self.value(input),
            self.value(kernels),
            self.value(bias),
            stride,
            same,
        )?;
        Ok(self.push(
            out,
            Op::TConv1d {
                input,
                kernels,
                bias,
                stride,
                same,
            },
        ))
    }

    pub fn avg_pool1d(&mut self, input: NodeId, pool: usize, stride: usize) -> Result<NodeId> {
        let out = ops::avg_pool1d_forward(self.value(input), pool, stride)?;
        Ok(self.push(out, Op::AvgPool { input, pool, stride }))
    }

    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = ops::dense_forward(self.value(input), self.value(weights), self.value(bias))?;
        Ok(self.push(out, Op::Dense { input, weights, bias }))
    }

    /// Train-mode batch norm. Returns the node and the batch statistics so
    /// the owning layer can fold them into its running stats.
    pub fn batch_norm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, BatchNormCache)> {
        let (out, cache) =
            ops::batch_norm_train(self.value(input), self.value(gamma), self.value(beta))?;
        let id = self.push(
            out,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                cache: cache.clone(),
            },
        );
        Ok((id, cache))
    }

    pub fn batch_norm_infer(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
    ) -> Result<NodeId> {
        let out = ops::batch_norm_infer(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            mean,
            var,
        )?;
        Ok(self.push(
            out,
            Op::BatchNormInfer {
                input,
                gamma,
                beta,
                mean: mean.to_vec(),
                var: var.to_vec(),
            },
        ))
    }

    pub fn selu(&mut self, input: NodeId) -> NodeId {
        let out = ops::selu_forward(self.value(input));
        self.push(out, Op::Selu { input })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out = ops::sigmoid_forward(self.value(input));
        self.push(out, Op::Sigmoid { input })
    }

    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let out = ops::softmax_forward(self.value(input))?;
        Ok(self.push(out, Op::Softmax { input }))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(input).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { input }))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::mse_forward(self.value(a), self.value(b))?;
        Ok(self.push(Tensor::scalar(v), Op::Mse { a, b }))
    }

    pub fn cross_entropy(&mut self, scores: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let v = ops::cross_entropy_forward(self.value(scores), &labels)?;
        Ok(self.push(Tensor::scalar(v), Op::CrossEntropy { scores, labels }))
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, ca: f64, cb: f64) -> Result<NodeId> {
        if !self.value(a).is_scalar() || !self.value(b).is_scalar() {
            return Err(Error::domain(
                "add_scaled combines scalar losses only".to_string(),
            ));
        }
        let v = ca * self.value(a).item() + cb * self.value(b).item();
        Ok(self.push(Tensor::scalar(v), Op::AddScaled { a, b, ca, cb }))
    }

    /// Runs the chain rule from `loss` back to every leaf. Gradients of
    /// trainable parameters land in the returned map; non-trainable
    /// parameters are skipped (values still conduct gradient to earlier
    /// nodes). Repeated calls on fresh tapes accumulate when the caller adds
    /// the maps into `Parameter::accumulate_grad`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::domain(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf { .. } | Op::Param { .. } => {
                    // kept for collection below
                    grads[idx] = Some(g);
                }
                Op::Conv1d {
                    input,
                    kernels,
                    bias,
                    dilation,
                    stride,
                    pad,
                } => {
                    let (dx, dw, db) = ops::conv1d_backward(
                        &g,
                        self.value(*input),
                        self.value(*kernels),
                        *dilation,
                        *stride,
                        *pad,
                    )?;
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *kernels, dw);
                    accumulate(&mut grads, *bias, db);
                }
                Op::TConv1d {
                    input,
                    kernels,
                    bias,
                    stride,
                    same,
                } => {
                    let (dx, dw, db) = ops::tconv1d_backward(
                        &g,
                        self.value(*input),
                        self.value(*kernels),
                        *stride,
                        *same,
                    )?;
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *kernels, dw);
                    accumulate(&mut grads, *bias, db);
                }
                Op::AvgPool { input, pool, stride } => {
                    let dx = ops::avg_pool1d_backward(&g, self.value(*input), *pool, *stride)?;
                    accumulate(&mut grads, *input, dx);
                }
                Op::Dense {
                    input,
                    weights,
                    bias,
                } => {
                    let (dx, dw, db) =
                        ops::dense_backward(&g, self.value(*input), self.value(*weights))?;
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *weights, dw);
                    accumulate(&mut grads, *bias, db);
                }
                Op::BatchNormTrain {
                    input,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dgamma, dbeta) =
                        ops::batch_norm_backward(&g, self.value(*input), self.value(*gamma), cache)?;
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::BatchNormInfer {
                    input,
                    gamma,
                    beta,
                    mean,
                    var,
                } => {
                    // running stats are constants here; d/dx = gamma / sqrt(var + eps)
                    let x = self.value(*input);
                    let (b, c, l) = match *x.shape() {
                        [b, c, l] => (b, c, l),
                        [b, f] => (b, f, 1),
                        _ => unreachable!("validated at record time"),
                    };
                    let gm = self.value(*gamma).data();
                    let mut dx = Tensor::zeros(x.shape().to_vec());
                    let mut dgamma = vec![0.0f64; c];
                    let mut dbeta = vec![0.0f64; c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let row = (bi * c + ci) * l;
                            let inv = 1.0 / (var[ci] + ops::BN_EPSILON).sqrt();
                            for t in 0..l {
                                let gv = g.data()[row + t];
                                dx.data_mut()[row + t] = gv * gm[ci] * inv;
                                dgamma[ci] += gv * (x.data()[row + t] - mean[ci]) * inv;
                                dbeta[ci] += gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *gamma, Tensor::new(vec![c], dgamma)?);
                    accumulate(&mut grads, *beta, Tensor::new(vec![c], dbeta)?);
                }
                Op::Selu { input } => {
                    let dx = ops::selu_backward(&g, self.value(*input));
                    accumulate(&mut grads, *input, dx);
                }
                Op::Sigmoid { input } => {
                    let dx = ops::sigmoid_backward(&g, &self.nodes[idx].value);
                    accumulate(&mut grads, *input, dx);
                }
                Op::Softmax { input } => {
                    let dx = ops::softmax_backward(&g, &self.nodes[idx].value);
                    accumulate(&mut grads, *input, dx);
                }
                Op::Reshape { input } => {
                    let dx = g.reshaped(self.value(*input).shape().to_vec())?;
                    accumulate(&mut grads, *input, dx);
                }
                Op::Mse { a, b } => {
                    let (da, db) = ops::mse_backward(g.item(), self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::CrossEntropy { scores, labels } => {
                    let ds = ops::cross_entropy_backward(g.item(), self.value(*scores), labels);
                    accumulate(&mut grads, *scores, ds);
                }
                Op::AddScaled { a, b, ca, cb } => {
                    accumulate(&mut grads, *a, Tensor::scalar(g.item() * ca));
                    accumulate(&mut grads, *b, Tensor::scalar(g.item() * cb));
                }
            }
        }

        let mut params = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Param { key, trainable } => {
                    let g = grads[idx].take();
                    if !trainable {
                        continue;
                    }
                    if let Some(g) = g {
                        match params.entry(*key) {
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(g);
                            }
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                let acc: &mut Tensor = e.get_mut();
                                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                    *a += b;
                                }
                            }
                        }
                    }
                }
                Op::Leaf { keep_grad: false } => grads[idx] = None,
                _ => {}
            }
        }
        Ok(Gradients { params, nodes: grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}
