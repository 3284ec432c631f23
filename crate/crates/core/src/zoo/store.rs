//! Keyed parameter pool shared by every child model.

use aod_substrate::{Moments, Optimizer, OptimizerKind, ParamSet, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AodError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// U(-b, b) with `b = sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
    Const(f64),
}

/// FNV-1a, used to derive a per-key seed that does not depend on creation order.
fn key_hash(key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Parameters keyed by layer, role and operator signature, plus the child
/// optimizer whose accumulators follow the same keys.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: ParamSet,
    optimizer: Optimizer,
    seed: u64,
}

impl ParamStore {
    pub fn new(kind: OptimizerKind, learning_rate: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            params: ParamSet::new(),
            optimizer: Optimizer::new(kind, learning_rate)?,
            seed,
        })
    }

    /// Returns the key, creating its tensor on first use.
    pub fn ensure(&mut self, key: &str, shape: &[usize], init: Init, trainable: bool) -> Result<()> {
        if let Some(t) = self.params.get(key) {
            if t.shape() != shape {
                return Err(AodError::Contract(format!(
                    "parameter `{key}` exists with shape {:?}, requested {shape:?}",
                    t.shape()
                )));
            }
            return Ok(());
        }
        let n: usize = shape.iter().product();
        let data = match init {
            Init::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ key_hash(key));
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Const(v) => vec![v; n],
        };
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = trainable;
        self.params.insert(key.to_string(), t);
        Ok(())
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.params.get(key)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of stored scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        Ok(self.optimizer.set_learning_rate(lr)?)
    }

    /// Applies one optimizer step to the keys that have gradients.
    pub fn step(&mut self, grads: &std::collections::BTreeMap<String, Tensor>) -> Result<()> {
        Ok(self.optimizer.step(&mut self.params, grads)?)
    }

    /// Overwrites non-trainable values such as running statistics.
    pub fn replace(&mut self, key: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(key)
            .ok_or_else(|| AodError::Contract(format!("unknown parameter `{key}`")))?;
        if slot.shape() != value.shape() {
            return Err(AodError::Contract(format!("shape change for `{key}`")));
        }
        let trainable = slot.requires_grad;
        *slot = value;
        slot.requires_grad = trainable;
        Ok(())
    }

    /// Copies the listed keys, with their optimizer state, out of `other`.
    /// Later merges win, so merging workers in a fixed order is deterministic.
    pub fn merge_from(&mut self, other: &ParamStore, keys: &[String]) {
        for key in keys {
            let Some(t) = other.params.get(key) else { continue };
            self.params.insert(key.clone(), t.clone());
            match other.optimizer.state_of(key) {
                Some(m) => self.optimizer.restore_state(key, Moments::clone(m)),
                None => self.optimizer.forget(key),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_created_once_with_fixed_shape() {
        let mut s = ParamStore::new(OptimizerKind::adam(), 0.01, 7).unwrap();
        s.ensure("a", &[2, 3], Init::HeUniform { fan_in: 3 }, true).unwrap();
        let first = s.get("a").unwrap().clone();
        s.ensure("a", &[2, 3], Init::HeUniform { fan_in: 3 }, true).unwrap();
        assert_eq!(s.get("a").unwrap(), &first);
        assert!(s.ensure("a", &[3, 2], Init::Const(0.0), true).is_err());
        let bound = 2.0f64.sqrt();
        assert!(first.data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn init_depends_on_key_not_order() {
        let mut a = ParamStore::new(OptimizerKind::adam(), 0.01, 1).unwrap();
        let mut b = ParamStore::new(OptimizerKind::adam(), 0.01, 1).unwrap();
        a.ensure("x", &[4], Init::HeUniform { fan_in: 4 }, true).unwrap();
        a.ensure("y", &[4], Init::HeUniform { fan_in: 4 }, true).unwrap();
        b.ensure("y", &[4], Init::HeUniform { fan_in: 4 }, true).unwrap();
        b.ensure("x", &[4], Init::HeUniform { fan_in: 4 }, true).unwrap();
        assert_eq!(a.params(), b.params());
    }
}
