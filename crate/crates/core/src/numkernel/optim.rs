use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::Tensor;
use crate::error::{Error, Result};

/// A learnable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

impl ParamTensor {
    pub fn trainable(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.dims());
        Self {
            value,
            grad,
            frozen: false,
        }
    }

    pub fn frozen(value: Tensor) -> Self {
        Self {
            frozen: true,
            ..Self::trainable(value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Adds `g` into the gradient; frozen parameters ignore it.
    pub fn accumulate(&mut self, g: &Tensor) {
        if self.frozen {
            return;
        }
        self.grad
            .add_assign(g)
            .expect("gradient dims must match parameter dims");
    }
}

/// Anything that owns named [`ParamTensor`]s.
pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor));

    fn zero_grads(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    /// `(total entries, trainable entries)`.
    fn param_counts(&self) -> (usize, usize) {
        let mut total = 0;
        let mut trainable = 0;
        self.visit_params("", &mut |_, p| {
            total += p.value.len();
            if !p.frozen {
                trainable += p.value.len();
            }
        });
        (total, trainable)
    }
}

/// First/second-moment state for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dims: &[usize], lr: f64) -> Self {
        Self {
            m: Tensor::zeros(dims),
            v: Tensor::zeros(dims),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `p` from its current gradient.
pub fn adam_step(p: &mut ParamTensor, s: &mut AdamState) -> Result<()> {
    if p.frozen {
        return Err(Error::Contract("adam update on a frozen parameter".into()));
    }
    if s.m.dims() != p.value.dims() || s.v.dims() != p.value.dims() {
        return Err(Error::shape("adam_step state", p.value.dims(), s.m.dims()));
    }
    s.step_count += 1;
    let t = s.step_count as i32;
    let c1 = 1.0 - s.beta1.powi(t);
    let c2 = 1.0 - s.beta2.powi(t);
    let (b1, b2) = (s.beta1, s.beta2);
    let m = s.m.data_mut();
    let v = s.v.data_mut();
    let g = p.grad.data();
    for (i, w) in p.value.data_mut().iter_mut().enumerate() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        *w -= s.lr * m_hat / (v_hat.sqrt() + s.eps);
    }
    Ok(())
}

/// Adam over every trainable parameter of a model, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M, lr: f64) -> Result<()> {
        self.step_filtered(model, lr, &|_| true)
    }

    /// Updates only parameters whose name passes `active`; the others keep
    /// their moments and step counts untouched.
    pub fn step_filtered<M: Parameterized + ?Sized>(
        &mut self,
        model: &mut M,
        lr: f64,
        active: &dyn Fn(&str) -> bool,
    ) -> Result<()> {
        let mut result = Ok(());
        model.visit_params_mut("", &mut |name, p| {
            if p.frozen || result.is_err() || !active(name) {
                return;
            }
            let state = self
                .states
                .entry(name.to_string())
                .or_insert_with(|| AdamState::new(p.value.dims(), lr));
            state.lr = lr;
            result = adam_step(p, state);
        });
        result
    }
}

/// Linear warmup followed by cosine decay, evaluated per epoch.
pub fn lr_at(epoch: usize, total_epochs: usize, warmup_epochs: usize, base_lr: f64) -> Result<f64> {
    if warmup_epochs >= total_epochs {
        return Err(Error::Param(format!(
            "warmup ({warmup_epochs}) must be shorter than training ({total_epochs})"
        )));
    }
    if epoch >= total_epochs {
        return Err(Error::Param(format!("epoch {epoch} outside [0, {total_epochs})")));
    }
    if epoch < warmup_epochs {
        return Ok(base_lr * (epoch + 1) as f64 / warmup_epochs as f64);
    }
    let progress = (epoch - warmup_epochs) as f64 / (total_epochs - warmup_epochs) as f64;
    Ok(base_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64, g: f64) -> ParamTensor {
        let mut p = ParamTensor::trainable(Tensor::full(&[1], v));
        p.grad = Tensor::full(&[1], g);
        p
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        for g in [3.0, -0.25, 1e-3] {
            let mut p = scalar_param(1.0, g);
            let mut s = AdamState::new(&[1], 1e-4);
            adam_step(&mut p, &mut s).unwrap();
            let delta = p.value.data()[0] - 1.0;
            let slack = 1e-4 * (1e-8 / f64::abs(g)) * 1.01 + 1e-16;
            assert!((delta + 1e-4 * g.signum()).abs() <= slack, "{delta}");
        }
    }

    #[test]
    fn zero_grad_leaves_value() {
        let mut p = scalar_param(0.5, 0.0);
        let mut s = AdamState::new(&[1], 1e-3);
        adam_step(&mut p, &mut s).unwrap();
        assert_eq!(p.value.data()[0], 0.5);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn constant_grad_moves_monotonically() {
        let mut p = scalar_param(0.0, 2.0);
        let mut s = AdamState::new(&[1], 1e-2);
        let mut trace = vec![0.0];
        for _ in 0..2 {
            adam_step(&mut p, &mut s).unwrap();
            trace.push(p.value.data()[0]);
        }
        assert!(trace[1] < trace[0] && trace[2] < trace[1]);
        assert_eq!(s.step_count, 2);
    }

    #[test]
    fn frozen_update_is_contract_error() {
        let mut p = ParamTensor::frozen(Tensor::zeros(&[2]));
        let mut s = AdamState::new(&[2], 1e-3);
        assert!(matches!(adam_step(&mut p, &mut s), Err(Error::Contract(_))));
    }

    #[test]
    fn schedule_shape() {
        let base = 1e-4;
        assert_eq!(lr_at(4, 50, 5, base).unwrap(), base);
        assert!((lr_at(0, 50, 5, base).unwrap() - base / 5.0).abs() < 1e-18);
        assert!(lr_at(49, 50, 5, base).unwrap() <= base * 0.01);
        assert!(matches!(lr_at(0, 5, 5, base), Err(Error::Param(_))));
        let lrs: Vec<f64> = (5..50).map(|e| lr_at(e, 50, 5, base).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
