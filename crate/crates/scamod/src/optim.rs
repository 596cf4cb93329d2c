//! Adam optimizer with per-parameter moment state.

use std::collections::HashMap;

use crate::module::ModuleGraph;
use crate::tape::ParamKey;
use crate::tensor::Parameter;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Moment state is keyed by `(slot, param id)`, so one optimizer instance
/// drives all modules of a network.
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    state: HashMap<ParamKey, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            state: HashMap::new(),
        }
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// Non-trainable parameters are never touched, whatever their gradient
    /// state. Updated values are rounded back onto the f32 grid.
    pub fn step(&mut self, modules: &mut [(u8, &mut ModuleGraph)]) {
        self.t += 1;
        let t = self.t;
        for (slot, module) in modules.iter_mut() {
            for layer in &mut module.layers {
                for p in &mut layer.params {
                    self.update_param(*slot, p, t);
                }
            }
        }
    }

    /// Single-parameter-list variant for standalone use.
    pub fn step_params(&mut self, slot: u8, params: &mut [Parameter]) {
        self.t += 1;
        let t = self.t;
        for p in params {
            self.update_param(slot, p, t);
        }
    }

    fn update_param(&mut self, slot: u8, p: &mut Parameter, t: u64) {
        if !p.trainable {
            return;
        }
        let Some(grad) = &p.grad else { return };
        let key = ParamKey { slot, id: p.id };
        let n = p.tensor.len();
        let st = self.state.entry(key).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        for ((w, &g), (m, v)) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(st.m.iter_mut().zip(st.v.iter_mut()))
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
        p.tensor.quantize_f32();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamId, Tensor};

    fn param(v: f64) -> Parameter {
        Parameter::new(ParamId(0), Tensor::from_vec(vec![v]))
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = param(0.5);
        p.accumulate_grad(&Tensor::from_vec(vec![0.0]));
        let before = p.tensor.clone();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step_params(0, std::slice::from_mut(&mut p));
        assert_eq!(p.tensor, before);
    }

    #[test]
    fn non_trainable_parameter_is_bit_identical() {
        let mut p = param(0.5);
        p.trainable = false;
        p.accumulate_grad(&Tensor::from_vec(vec![123.0]));
        let before = p.tensor.data()[0].to_bits();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..10 {
            adam.step_params(0, std::slice::from_mut(&mut p));
        }
        assert_eq!(p.tensor.data()[0].to_bits(), before);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // bias correction makes the first step ~= lr regardless of grad scale
        let mut p = param(1.0);
        p.accumulate_grad(&Tensor::from_vec(vec![1.0]));
        let mut adam = Adam::new(AdamConfig::default());
        adam.step_params(0, std::slice::from_mut(&mut p));
        let moved = 1.0 - p.tensor.data()[0];
        assert!((moved - 1e-3).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn missing_gradient_is_a_no_op() {
        let mut p = param(0.25);
        let before = p.tensor.clone();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step_params(0, std::slice::from_mut(&mut p));
        assert_eq!(p.tensor, before);
    }
}
