use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment buffers for every parameter of a store.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update with learning rate `lr`. Frozen parameters
/// and parameters without a gradient are left untouched.
pub fn adam_step(store: &mut ParamStore, grads: &[Option<Tensor>], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::shape(format!(
            "adam: {} grads / {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        if p.frozen {
            continue;
        }
        if g.shape() != p.value.shape() {
            return Err(Error::shape(format!("adam: gradient shape for {}", p.name)));
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let decay = 1.0 - lr * c.weight_decay;
        for (((w, gv), mv), vv) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
            *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *w = *w * decay - lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// Linear warm-up to `peak` followed by cosine decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Learning rate for the 0-based `step`.
    pub fn at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut s = one_param(0.7);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamState::new(&s, cfg);
        for _ in 0..3 {
            adam_step(&mut s, &[Some(Tensor::zeros(&[1]))], &mut st, 1e-2).unwrap();
        }
        assert_eq!(s.iter().next().unwrap().value.data(), &[0.7]);
    }

    #[test]
    fn frozen_parameter_untouched() {
        let mut s = one_param(0.7);
        s.freeze(&["w".into()]).unwrap();
        let mut st = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &[Some(Tensor::full(&[1], 5.0))], &mut st, 1.0).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data(), &[0.7]);
    }

    #[test]
    fn first_step_matches_bias_corrected_formula() {
        // m1 = (1-β1)·g, v1 = (1-β2)·g²; after bias correction both are
        // exactly g and g², so the step is lr·g/(|g| + ε).
        let (lr, eps) = (1e-3, 1e-8);
        let mut s = one_param(0.0);
        let cfg = AdamConfig {
            eps,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamState::new(&s, cfg);
        adam_step(&mut s, &[Some(Tensor::full(&[1], 1.0))], &mut st, lr).unwrap();
        let got = s.iter().next().unwrap().value.data()[0];
        assert!((got - (-lr / (1.0 + eps))).abs() < 1e-18);
    }

    #[test]
    fn schedule_warmup_then_cosine() {
        let s = LrSchedule {
            peak: 2e-4,
            warmup_steps: 50,
            total_steps: 500,
        };
        assert!((s.at(0) - 2e-4 / 50.0).abs() < 1e-20);
        assert!((s.at(49) - 2e-4).abs() < 1e-20);
        assert!((s.at(50) - 2e-4).abs() < 1e-20);
        assert!((s.at(275) - 1e-4).abs() < 1e-12);
        assert!(s.at(499) < 1e-8);
        assert!((1..500).all(|t| t < 50 || s.at(t) <= s.at(t - 1)));
    }
}
