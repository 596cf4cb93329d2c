//! Dense tensors and learnable parameters.
//!
//! All math runs in `f64`. Parameter values are kept on the `f32` grid
//! (every mutation rounds through `f32`), which makes the 32-bit module
//! container lossless: serialize/deserialize returns bit-identical weights.

use crate::error::{Error, Result};

/// Dense numeric array. Row-major storage, shape is a list of extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dimension(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dimension(format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// 1-D tensor from a slice.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Same data, new shape. Element count must match.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rounds every value to the nearest `f32`. Parameter stores go through
    /// this so the on-disk 32-bit representation is exact.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// Identifier of a parameter within one module. Assigned in layer order at
/// build time, so it is stable across serialization round trips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub u32);

/// A learnable tensor. `trainable: false` makes the optimizer skip it
/// entirely; the values stay bit-identical no matter how many steps run.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub id: ParamId,
    pub tensor: Tensor,
    pub trainable: bool,
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn new(id: ParamId, mut tensor: Tensor) -> Self {
        tensor.quantize_f32();
        Parameter {
            id,
            tensor,
            trainable: true,
            grad: None,
        }
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    /// Repeated backward passes accumulate until `zero_grad`.
    pub fn accumulate_grad(&mut self, g: &Tensor) {
        debug_assert_eq!(g.shape(), self.tensor.shape());
        match &mut self.grad {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn quantize_puts_values_on_f32_grid() {
        let mut t = Tensor::from_vec(vec![0.1, std::f64::consts::PI]);
        t.quantize_f32();
        for &v in t.data() {
            assert_eq!(v, v as f32 as f64);
        }
    }

    #[test]
    fn grad_accumulates_across_calls() {
        let mut p = Parameter::new(ParamId(0), Tensor::from_vec(vec![1.0, 2.0]));
        p.accumulate_grad(&Tensor::from_vec(vec![0.5, 0.5]));
        p.accumulate_grad(&Tensor::from_vec(vec![0.25, 0.75]));
        assert_eq!(p.grad.as_ref().unwrap().data(), &[0.75, 1.25]);
        p.zero_grad();
        assert!(p.grad.is_none());
    }
}
