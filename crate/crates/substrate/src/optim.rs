//! First-order optimizers with per-parameter state.

use std::collections::BTreeMap;

use crate::error::{Result, SubstrateError};
use crate::graph::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// `v = momentum * v + g; w -= lr * v`.
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Accumulators of one parameter, opaque outside this module.
#[derive(Debug, Clone)]
pub struct Moments {
    first: Tensor,
    second: Option<Tensor>,
    steps: u64,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    state: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        check_rate(learning_rate)?;
        match kind {
            OptimizerKind::SgdMomentum { momentum } if !(0.0..1.0).contains(&momentum) => {
                return Err(SubstrateError::Contract(format!("momentum must be in [0,1), got {momentum}")));
            }
            OptimizerKind::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 =>
            {
                return Err(SubstrateError::Contract("invalid Adam coefficients".into()));
            }
            _ => {}
        }
        Ok(Self {
            kind,
            learning_rate,
            state: BTreeMap::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, learning_rate: f64) -> Result<()> {
        check_rate(learning_rate)?;
        self.learning_rate = learning_rate;
        Ok(())
    }

    /// Number of updates applied to `name` so far.
    pub fn steps(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |m| m.steps)
    }

    pub fn state_of(&self, name: &str) -> Option<&Moments> {
        self.state.get(name)
    }

    /// Installs accumulators taken from another optimizer of the same kind.
    pub fn restore_state(&mut self, name: &str, moments: Moments) {
        self.state.insert(name.to_string(), moments);
    }

    pub fn forget(&mut self, name: &str) {
        self.state.remove(name);
    }

    /// Applies one update to every parameter that has a gradient.
    ///
    /// All gradients are validated first, so a non-finite or misshapen
    /// gradient leaves both parameters and optimizer state untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| SubstrateError::MissingParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(SubstrateError::Contract(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(SubstrateError::NonFiniteGradient(name.clone()));
            }
        }
        for (name, g) in grads {
            let p = params.get_mut(name).expect("validated above");
            let state = self.state.entry(name.clone()).or_insert_with(|| Moments {
                first: Tensor::zeros(g.shape()),
                second: matches!(self.kind, OptimizerKind::Adam { .. }).then(|| Tensor::zeros(g.shape())),
                steps: 0,
            });
            state.steps += 1;
            let lr = self.learning_rate;
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    let v = state.first.data_mut();
                    for ((w, v), g) in p.data_mut().iter_mut().zip(v).zip(g.data()) {
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let t = state.steps as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let m = state.first.data_mut();
                    let v = state.second.as_mut().expect("adam second moment").data_mut();
                    for (((w, m), v), g) in p.data_mut().iter_mut().zip(m).zip(v).zip(g.data()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_rate(learning_rate: f64) -> Result<()> {
    if learning_rate > 0.0 && learning_rate.is_finite() {
        Ok(())
    } else {
        Err(SubstrateError::Contract(format!(
            "learning rate must be positive, got {learning_rate}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn plain_sgd_step() {
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum { momentum: 0.0 }, 0.1).unwrap();
        let mut params = one("w", 1.0);
        opt.step(&mut params, &one("w", 1.0)).unwrap();
        assert!((params["w"].item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_weights_and_decays_velocity() {
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum { momentum: 0.5 }, 0.1).unwrap();
        let mut params = one("w", 1.0);
        opt.step(&mut params, &one("w", 1.0)).unwrap();
        let after_first = params["w"].item();
        opt.step(&mut params, &one("w", 0.0)).unwrap();
        // velocity 1 -> 0.5, so the weight still moves by lr * 0.5
        assert!((params["w"].item() - (after_first - 0.05)).abs() < 1e-15);

        let mut adam = Optimizer::new(OptimizerKind::adam(), 0.1).unwrap();
        let mut p = one("w", 2.0);
        adam.step(&mut p, &one("w", 0.0)).unwrap();
        assert_eq!(p["w"].item(), 2.0);
    }

    #[test]
    fn nan_gradient_is_rejected_without_side_effects() {
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1).unwrap();
        let mut params = BTreeMap::from([
            ("a".to_string(), Tensor::scalar(1.0)),
            ("b".to_string(), Tensor::scalar(1.0)),
        ]);
        let grads = BTreeMap::from([
            ("a".to_string(), Tensor::scalar(1.0)),
            ("b".to_string(), Tensor::scalar(f64::NAN)),
        ]);
        assert!(matches!(
            opt.step(&mut params, &grads),
            Err(SubstrateError::NonFiniteGradient(_))
        ));
        assert_eq!(params["a"].item(), 1.0);
        assert_eq!(opt.steps("a"), 0);
    }

    #[test]
    fn adam_moves_towards_quadratic_minimum() {
        // f(w) = (w - 3)^2; the first bias-corrected Adam step has length lr.
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.5).unwrap();
        let mut params = one("w", 0.0);
        let g = 2.0 * (params["w"].item() - 3.0);
        opt.step(&mut params, &one("w", g)).unwrap();
        let w = params["w"].item();
        assert!((w - 0.5).abs() < 1e-6);
        assert!((w - 3.0).abs() < 3.0);
    }
}
