//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore, Parameter};
use super::TensorError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 4e-5, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer state. Moment buffers are created lazily, and only for
/// non-frozen parameters.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step_count: u64,
    moments: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step_count: 0, moments: HashMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn has_moments(&self, id: ParamId) -> bool {
        self.moments.contains_key(&id)
    }

    /// One update using the configured learning rate for every parameter.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), TensorError> {
        let lr = self.config.learning_rate;
        self.step_with(store, |_| lr)
    }

    /// One update with a per-parameter learning rate. Frozen parameters are
    /// skipped untouched; a trainable parameter without a gradient is an error.
    pub fn step_with(&mut self, store: &mut ParamStore, lr_of: impl Fn(&Parameter) -> f64) -> Result<(), TensorError> {
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.frozen && p.grad.is_none()) {
            return Err(TensorError::MissingGradient(p.name.clone()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let AdamWConfig { beta1, beta2, epsilon, weight_decay, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get_mut(id);
            let lr = lr_of(p);
            let n = p.value.numel();
            let m = self.moments.entry(id).or_insert_with(|| Moments { first: vec![0.0; n], second: vec![0.0; n] });
            let grad = p.grad.as_ref().expect("checked above");
            for (((w, &g), m1), m2) in
                p.value.data_mut().iter_mut().zip(grad.data()).zip(m.first.iter_mut()).zip(m.second.iter_mut())
            {
                *m1 = beta1 * *m1 + (1.0 - beta1) * g;
                *m2 = beta2 * *m2 + (1.0 - beta2) * g * g;
                let mhat = *m1 / bc1;
                let vhat = *m2 / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + epsilon) + weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Init, ParamGroup, Registry, Tensor};

    fn single(value: f64, grad: f64, frozen: bool) -> (ParamStore, ParamId) {
        let mut r = Registry::new();
        let id = r.declare("w", &[1], Init::Zeros, ParamGroup::Backbone).unwrap();
        r.set_frozen(id, frozen);
        let mut s = ParamStore::materialize(&r, 0);
        s.get_mut(id).value = Tensor::vector(vec![value]);
        s.get_mut(id).grad = Some(Tensor::vector(vec![grad]));
        (s, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = single(1.0, 0.0, false);
        let mut opt = AdamW::new(AdamWConfig { learning_rate: 0.1, weight_decay: 0.0, ..Default::default() });
        opt.step(&mut s).unwrap();
        assert_eq!(s.get(id).value.data(), &[1.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let (mut s, id) = single(0.7, 3.0, true);
        let before = s.get(id).value.clone();
        let mut opt = AdamW::new(AdamWConfig { learning_rate: 0.1, ..Default::default() });
        opt.step(&mut s).unwrap();
        assert!(s.get(id).value.bit_eq(&before));
        assert!(!opt.has_moments(id));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // t = 1: m̂ = g, v̂ = g², update = lr * g / (|g| + eps).
        let (mut s, id) = single(0.0, 1.0, false);
        let mut opt =
            AdamW::new(AdamWConfig { learning_rate: 0.1, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.0 });
        opt.step(&mut s).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.get(id).value.data()[0] - expected).abs() < 1e-15);
        assert!((s.get(id).value.data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut s, id) = single(0.0, 1.0, false);
        s.get_mut(id).grad = None;
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut s), Err(TensorError::MissingGradient(n)) if n == "w"));
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (mut s, id) = single(0.3, -2.0, false);
        let before = s.get(id).value.clone();
        let mut opt = AdamW::new(AdamWConfig { learning_rate: 0.0, ..Default::default() });
        for _ in 0..5 {
            opt.step(&mut s).unwrap();
        }
        assert!(s.get(id).value.bit_eq(&before));
    }
}
