use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

struct Param<T> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Named parameters together with their gradient accumulators and AdamW
/// moment estimates.
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
    step: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.clone(),
                    grad: p.grad.clone(),
                    m: p.m.clone(),
                    v: p.v.clone(),
                })
                .collect(),
            index: self.index.clone(),
            step: self.step,
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        let shape = value.shape().to_vec();
        let idx = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
        });
        self.index.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.params[i].name
    }

    pub fn value(&self, i: usize) -> &Tensor<T> {
        &self.params[i].value
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.params[i].value
    }

    pub fn grad(&self, i: usize) -> &Tensor<T> {
        &self.params[i].grad
    }

    pub fn grad_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.params[i].grad
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn scale_grads(&mut self, c: T) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = *g * c);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    /// Same parameter values at another precision; optimizer state is reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(&p.name, p.value.cast())
                .expect("names are unique");
        }
        out.step = self.step;
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Cosine decay from `lr` to `lr * min_lr_ratio`, ending at this step;
    /// 0 keeps the rate constant after warmup.
    pub decay_steps: u64,
    pub min_lr_ratio: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 100,
            decay_steps: 0,
            min_lr_ratio: 0.1,
        }
    }
}

impl AdamW {
    /// Learning rate for the step about to be taken: linear warmup, then
    /// optional cosine decay.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.decay_steps <= self.warmup_steps {
            return self.lr;
        }
        let span = (self.decay_steps - self.warmup_steps) as f64;
        let frac = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }

    /// One decoupled-weight-decay Adam update using the accumulated gradients.
    ///
    /// Weight decay applies to matrices only; biases, gains and vectors are
    /// left undecayed.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>) {
        let t = store.step + 1;
        let lr = self.lr_at(store.step);
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let eps = T::from_f64(self.eps);
        let lr_t = T::from_f64(lr);
        let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
        for p in &mut store.params {
            let decay = if p.value.shape().len() >= 2 {
                T::from_f64(lr * self.weight_decay)
            } else {
                T::zero()
            };
            let n = p.value.len();
            let (val, grad) = (p.value.data_mut(), p.grad.data());
            let (m, v) = (p.m.data_mut(), p.v.data_mut());
            for i in 0..n {
                let g = grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                val[i] = val[i] - decay * val[i] - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        store.step = t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![1, 1], vec![v]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut s = store_with(0.7);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        for _ in 0..5 {
            opt.step(&mut s);
        }
        assert_eq!(s.value(0).item(), 0.7);
        assert_eq!(s.step_count(), 5);
    }

    #[test]
    fn first_step_is_normalised_gradient() {
        let opt = AdamW {
            weight_decay: 0.0,
            warmup_steps: 0,
            lr: 0.01,
            ..AdamW::default()
        };
        for g in [2.5, -0.003, 1e-9] {
            let mut s = store_with(1.0);
            s.grad_mut(0).data_mut()[0] = g;
            opt.step(&mut s);
            let want = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((s.value(0).item() - want).abs() < 1e-12, "g={g}");
        }
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        // Scalar recursion oracle: with constant g the bias-corrected ratio
        // m̂/√v̂ equals g/|g| exactly at every step (up to eps).
        let opt = AdamW {
            weight_decay: 0.0,
            warmup_steps: 0,
            lr: 1e-3,
            ..AdamW::default()
        };
        let mut s = store_with(0.0);
        let g = 0.37;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut prev = 0.0;
        for t in 1..=200 {
            s.zero_grad();
            s.grad_mut(0).data_mut()[0] = g;
            opt.step(&mut s);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            let want_step = -1e-3 * mhat / (vhat.sqrt() + 1e-8);
            let step = s.value(0).item() - prev;
            assert!((step - want_step).abs() < 1e-15);
            assert!((step + 1e-3).abs() < 1e-9);
            prev = s.value(0).item();
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store_with(1.0);
        assert!(s.insert("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn warmup_is_linear() {
        let opt = AdamW::default();
        assert!((opt.lr_at(0) - 3e-6).abs() < 1e-18);
        assert!((opt.lr_at(49) - 1.5e-4).abs() < 1e-15);
        assert_eq!(opt.lr_at(500), 3e-4);
        let cos = AdamW {
            decay_steps: 1100,
            ..opt
        };
        assert_eq!(cos.lr_at(100), 3e-4);
        assert!((cos.lr_at(600) - 3e-4 * 0.55).abs() < 1e-15);
        assert!((cos.lr_at(1100) - 3e-5).abs() < 1e-18);
        assert!((cos.lr_at(5000) - 3e-5).abs() < 1e-18);
    }
}
