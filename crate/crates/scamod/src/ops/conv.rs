//! 1-D convolution with dilation, and its transpose.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Padding policy for `conv1d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    /// Output length `ceil(len / stride)`; the input is virtually padded
    /// with zeros, split evenly (extra zero on the right).
    Same,
    /// No padding; the input must cover at least one receptive field.
    Valid,
}

/// Span of a dilated kernel over the input: `k + (k - 1) * (dr - 1)`.
///
/// The `dr - 1` zeros inserted between taps widen the window without adding
/// weights; `dr = 1` leaves the kernel unchanged.
pub fn receptive_field(kernel_len: usize, dilation_rate: usize) -> Result<usize> {
    if kernel_len == 0 || dilation_rate == 0 {
        return Err(Error::domain(format!(
            "receptive_field needs positive arguments, got kernel_len={kernel_len}, dilation_rate={dilation_rate}"
        )));
    }
    Ok(kernel_len + (kernel_len - 1) * (dilation_rate - 1))
}

/// Left/total virtual padding for the given geometry.
fn padding(len: usize, eff_k: usize, stride: usize, pad: PadMode) -> (usize, usize) {
    match pad {
        PadMode::Valid => (0, len),
        PadMode::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + eff_k).saturating_sub(len);
            (total / 2, len + total)
        }
    }
}

/// Output length of `conv1d` for the given geometry.
pub fn conv1d_out_len(
    len: usize,
    kernel_len: usize,
    dilation_rate: usize,
    stride: usize,
    pad: PadMode,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::domain("stride must be positive".to_string()));
    }
    let eff_k = receptive_field(kernel_len, dilation_rate)?;
    let (_, padded) = padding(len, eff_k, stride, pad);
    if padded < eff_k {
        return Err(Error::dimension(format!(
            "input length {len} is shorter than the receptive field {eff_k} under valid padding"
        )));
    }
    Ok((padded - eff_k) / stride + 1)
}

/// Dilated 1-D convolution (cross-correlation), `(B, Ci, L) -> (B, Co, Lo)`.
///
/// `kernels` is `(Co, Ci, K)`, `bias` is `(Co)`. Dilation walks the taps at
/// stride `dr` over the input; no zero-stuffed kernel is ever materialized.
pub fn conv1d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    dilation_rate: usize,
    stride: usize,
    pad: PadMode,
) -> Result<Tensor> {
    let [b, ci, len] = conv_in_shape(input)?;
    let [co, kci, k] = kernel_shape(kernels)?;
    if kci != ci {
        return Err(Error::dimension(format!(
            "kernel expects {kci} input channels, input has {ci}"
        )));
    }
    if bias.len() != co {
        return Err(Error::dimension(format!(
            "bias length {} does not match {co} kernels",
            bias.len()
        )));
    }
    let eff_k = receptive_field(k, dilation_rate)?;
    let lo = conv1d_out_len(len, k, dilation_rate, stride, pad)?;
    let (pad_left, _) = padding(len, eff_k, stride, pad);

    let x = input.data();
    let w = kernels.data();
    let bs = bias.data();
    let mut out = vec![0.0f64; b * co * lo];
    for bi in 0..b {
        for oc in 0..co {
            let orow = (bi * co + oc) * lo;
            out[orow..orow + lo].fill(bs[oc]);
            for icn in 0..ci {
                let xrow = (bi * ci + icn) * len;
                let wrow = &w[(oc * ci + icn) * k..(oc * ci + icn) * k + k];
                for t in 0..lo {
                    let base = (t * stride) as isize - pad_left as isize;
                    let (j_lo, j_hi) = tap_range(base, len, k, dilation_rate);
                    let mut acc = 0.0;
                    for j in j_lo..j_hi {
                        // base + j*dr is in [0, len) for j in the tap range
                        let off = (base + (j * dilation_rate) as isize) as usize;
                        acc += wrow[j] * x[xrow + off];
                    }
                    out[orow + t] += acc;
                }
            }
        }
    }
    Tensor::new(vec![b, co, lo], out)
}

/// Half-open range of kernel taps that land inside `[0, len)` for a window
/// starting at (possibly negative) `base`.
#[inline]
fn tap_range(base: isize, len: usize, k: usize, dr: usize) -> (usize, usize) {
    let j_lo = if base >= 0 {
        0
    } else {
        ((-base) as usize).div_ceil(dr)
    };
    let j_hi = if base >= len as isize {
        0
    } else {
        // largest j with base + j*dr <= len - 1, exclusive bound
        (((len as isize - 1 - base) as usize) / dr + 1).min(k)
    };
    (j_lo.min(j_hi), j_hi)
}

/// Gradients of `conv1d_forward` w.r.t. input, kernels, and bias.
pub fn conv1d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    kernels: &Tensor,
    dilation_rate: usize,
    stride: usize,
    pad: PadMode,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [b, ci, len] = conv_in_shape(input)?;
    let [co, _, k] = kernel_shape(kernels)?;
    let eff_k = receptive_field(k, dilation_rate)?;
    let lo = conv1d_out_len(len, k, dilation_rate, stride, pad)?;
    let (pad_left, _) = padding(len, eff_k, stride, pad);
    debug_assert_eq!(grad_out.shape(), &[b, co, lo]);

    let x = input.data();
    let w = kernels.data();
    let g = grad_out.data();
    let mut dx = vec![0.0f64; b * ci * len];
    let mut dw = vec![0.0f64; co * ci * k];
    let mut db = vec![0.0f64; co];
    for bi in 0..b {
        for oc in 0..co {
            let grow = (bi * co + oc) * lo;
            for t in 0..lo {
                db[oc] += g[grow + t];
            }
            for icn in 0..ci {
                let xrow = (bi * ci + icn) * len;
                let wbase = (oc * ci + icn) * k;
                for t in 0..lo {
                    let gv = g[grow + t];
                    let base = (t * stride) as isize - pad_left as isize;
                    let (j_lo, j_hi) = tap_range(base, len, k, dilation_rate);
                    for j in j_lo..j_hi {
                        let off = (base + (j * dilation_rate) as isize) as usize;
                        dw[wbase + j] += gv * x[xrow + off];
                        dx[xrow + off] += gv * w[wbase + j];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![b, ci, len], dx)?,
        Tensor::new(vec![co, ci, k], dw)?,
        Tensor::new(vec![co], db)?,
    ))
}

/// Output length of the transposed convolution.
///
/// `same = false` gives the full scatter extent `(L - 1) * stride + K`,
/// the adjoint of a valid convolution. `same = true` fixes the output to
/// `L * stride` (the adjoint of a same-padded convolution), cropping or
/// zero-extending the scatter as needed.
pub fn tconv1d_out_len(len: usize, kernel_len: usize, stride: usize, same: bool) -> usize {
    if same {
        len * stride
    } else {
        (len - 1) * stride + kernel_len
    }
}

/// Transposed 1-D convolution, `(B, Co, L) -> (B, Ci, Lo)` for kernels of
/// shape `(Co, Ci, K)` — the adjoint map of `conv1d_forward` with the same
/// kernel tensor. `bias` is `(Ci)` and is added to every output position.
pub fn tconv1d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    same: bool,
) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::domain("stride must be positive".to_string()));
    }
    let [b, co, len] = conv_in_shape(input)?;
    let [kco, ci, k] = kernel_shape(kernels)?;
    if kco != co {
        return Err(Error::dimension(format!(
            "kernel expects {kco} input channels, input has {co}"
        )));
    }
    if bias.len() != ci {
        return Err(Error::dimension(format!(
            "bias length {} does not match {ci} output channels",
            bias.len()
        )));
    }
    let lo = tconv1d_out_len(len, k, stride, same);
    let crop_left = if same { k.saturating_sub(stride) / 2 } else { 0 };

    let x = input.data();
    let w = kernels.data();
    let mut out = vec![0.0f64; b * ci * lo];
    for bi in 0..b {
        for icn in 0..co {
            let xrow = (bi * co + icn) * len;
            for ocn in 0..ci {
                let orow = (bi * ci + ocn) * lo;
                let wrow = (icn * ci + ocn) * k;
                for i in 0..len {
                    let xv = x[xrow + i];
                    let base = (i * stride) as isize - crop_left as isize;
                    for j in 0..k {
                        let t = base + j as isize;
                        if t >= 0 && (t as usize) < lo {
                            out[orow + t as usize] += xv * w[wrow + j];
                        }
                    }
                }
            }
        }
    }
    let bs = bias.data();
    for bi in 0..b {
        for ocn in 0..ci {
            let orow = (bi * ci + ocn) * lo;
            for t in 0..lo {
                out[orow + t] += bs[ocn];
            }
        }
    }
    Tensor::new(vec![b, ci, lo], out)
}

/// Gradients of `tconv1d_forward` w.r.t. input, kernels, and bias.
pub fn tconv1d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    same: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [b, co, len] = conv_in_shape(input)?;
    let [_, ci, k] = kernel_shape(kernels)?;
    let lo = tconv1d_out_len(len, k, stride, same);
    debug_assert_eq!(grad_out.shape(), &[b, ci, lo]);
    let crop_left = if same { k.saturating_sub(stride) / 2 } else { 0 };

    let x = input.data();
    let w = kernels.data();
    let g = grad_out.data();
    let mut dx = vec![0.0f64; b * co * len];
    let mut dw = vec![0.0f64; co * ci * k];
    let mut db = vec![0.0f64; ci];
    for bi in 0..b {
        for icn in 0..co {
            let xrow = (bi * co + icn) * len;
            for ocn in 0..ci {
                let orow = (bi * ci + ocn) * lo;
                let wrow = (icn * ci + ocn) * k;
                for i in 0..len {
                    let base = (i * stride) as isize - crop_left as isize;
                    for j in 0..k {
                        let t = base + j as isize;
                        if t >= 0 && (t as usize) < lo {
                            let gv = g[orow + t as usize];
                            dx[xrow + i] += gv * w[wrow + j];
                            dw[wrow + j] += gv * x[xrow + i];
                        }
                    }
                }
            }
        }
    }
    for bi in 0..b {
        for ocn in 0..ci {
            let orow = (bi * ci + ocn) * lo;
            for t in 0..lo {
                db[ocn] += g[orow + t];
            }
        }
    }
    Ok((
        Tensor::new(vec![b, co, len], dx)?,
        Tensor::new(vec![co, ci, k], dw)?,
        Tensor::new(vec![ci], db)?,
    ))
}

fn conv_in_shape(t: &Tensor) -> Result<[usize; 3]> {
    match *t.shape() {
        [b, c, l] => Ok([b, c, l]),
        _ => Err(Error::dimension(format!(
            "expected (batch, channels, length) tensor, got shape {:?}",
            t.shape()
        ))),
    }
}

fn kernel_shape(t: &Tensor) -> Result<[usize; 3]> {
    match *t.shape() {
        [co, ci, k] => Ok([co, ci, k]),
        _ => Err(Error::dimension(format!(
            "expected (out_ch, in_ch, kernel_len) kernels, got shape {:?}",
            t.shape()
        ))),
    }
}
