use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tape::Gradients;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone)]
struct Slot<F> {
    name: String,
    value: Tensor<F>,
    grad: Tensor<F>,
    m: Tensor<F>,
    v: Tensor<F>,
}

/// Named parameters with gradient accumulators and Adam moments.
///
/// Parameters keep their insertion order, which is also the order they are
/// serialised in.
#[derive(Clone)]
pub struct ParameterStore<F: Scalar = f32> {
    slots: Vec<Slot<F>>,
    index: HashMap<String, ParamId>,
    step: u64,
}

impl<F: Scalar> Default for ParameterStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore {
            slots: Vec::new(),
            index: HashMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<F>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter path {name}")));
        }
        let id = ParamId(self.slots.len());
        let zeros = Tensor::zeros(value.shape());
        self.slots.push(Slot {
            name: name.to_string(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Looks a parameter up by path, reporting a missing one as a config error.
    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.slots[id.0].grad
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor<F>, &Tensor<F>) {
        let s = &self.slots[id.0];
        (&s.m, &s.v)
    }

    pub fn set_moments(&mut self, id: ParamId, m: Tensor<F>, v: Tensor<F>) -> Result<()> {
        let s = &mut self.slots[id.0];
        if m.shape() != s.value.shape() || v.shape() != s.value.shape() {
            return Err(Error::dim("set_moments", s.name.clone()));
        }
        s.m = m;
        s.v = v;
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    /// Adds `scale · g` into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients<F>, scale: F) -> Result<()> {
        for (&id, g) in &grads.by_param {
            let slot = &mut self.slots[id.0];
            if g.shape() != slot.grad.shape() {
                return Err(Error::dim(
                    "accumulate",
                    format!("{}: {:?} vs {:?}", slot.name, g.shape(), slot.grad.shape()),
                ));
            }
            for (a, &v) in slot.grad.data_mut().iter_mut().zip(g.data()) {
                *a += v * scale;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.grad.data_mut().iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// One bias-corrected Adam update from the accumulated gradients, which are
    /// cleared afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if cfg.lr.is_nan() || cfg.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be > 0", cfg.lr)));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || cfg.eps <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps > 0".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
        let c1 = F::lit(1.0 - cfg.beta1.powi(t));
        let c2 = F::lit(1.0 - cfg.beta2.powi(t));
        let lr = F::lit(cfg.lr);
        let eps = F::lit(cfg.eps);
        for s in &mut self.slots {
            s.grad.check_finite("adam_step")?;
            let iter = s
                .value
                .data_mut()
                .iter_mut()
                .zip(s.grad.data_mut().iter_mut())
                .zip(s.m.data_mut().iter_mut().zip(s.v.data_mut().iter_mut()));
            for ((p, g), (m, v)) in iter {
                *m = b1 * *m + (F::one() - b1) * *g;
                *v = b2 * *v + (F::one() - b2) * *g * *g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
                *g = F::zero();
            }
        }
        Ok(())
    }
}
