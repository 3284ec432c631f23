//! Bayesian recurrent controller: a two-layer LSTM policy whose weights carry
//! a diagonal Gaussian posterior, sharpened per episode by one gradient step.

mod policy;

use std::collections::BTreeMap;

use aod_substrate::ops::softplus;
use aod_substrate::ops::sigmoid;
use aod_substrate::{Mode, Optimizer, OptimizerKind, ParamSet, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AodError, Result};

pub use policy::{state_feed, unroll, zero_state, Decode, NetShape, Unrolled, STATE_NAMES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub hidden: usize,
    pub embed: usize,
    pub temperature: f64,
    pub tanh_constant: f64,
    /// Means start uniform in `[-init_range, init_range]`.
    pub init_range: f64,
    pub sigma_init: f64,
    pub eta_init: f64,
    pub sigma_prior: f64,
    /// Standard deviation of the zero-mean hyperprior on the weights.
    pub hyperprior_std: f64,
    pub learning_rate: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            hidden: 50,
            embed: 50,
            temperature: 5.0,
            tanh_constant: 2.5,
            init_range: 0.1,
            sigma_init: 0.05,
            eta_init: 1e-2,
            sigma_prior: 0.1,
            hyperprior_std: 1.0,
            learning_rate: 3.5e-4,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.temperature,
            self.tanh_constant,
            self.sigma_init,
            self.sigma_prior,
            self.hyperprior_std,
            self.learning_rate,
        ];
        if self.hidden == 0 || self.embed == 0 || positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(AodError::Config("controller sizes and scales must be positive".into()));
        }
        if !(self.eta_init >= 0.0) || !(self.init_range >= 0.0) {
            return Err(AodError::Config("eta_init and init_range must be non-negative".into()));
        }
        Ok(())
    }
}

/// KL divergence between scalar Gaussians `N(m1, s1^2)` and `N(m2, s2^2)`.
pub fn gaussian_kl(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    // rounding can leave a tiny negative value for near-identical arguments
    ((s2 / s1).ln() + (s1 * s1 + (m1 - m2).powi(2)) / (2.0 * s2 * s2) - 0.5).max(0.0)
}

/// `r + eta_explore * kl`.
pub fn intrinsic_reward(reward: f64, kl_sharpen: f64, eta_explore: f64) -> f64 {
    reward + eta_explore * kl_sharpen
}

/// One sampled policy: the noise that produced its weights and its actions.
#[derive(Debug, Clone)]
pub struct SampledPolicy {
    pub actions: Vec<usize>,
    /// `phi = mu + sigma * eps`
    pub eps: ParamSet,
    /// `theta = phi - eta * data_grad + sigma_prior * eps_sharp`
    pub eps_sharp: ParamSet,
    /// Gradient of `-log p(actions | phi)`; `None` when sharpening was skipped.
    pub data_grad: Option<ParamSet>,
    pub theta: ParamSet,
    /// Per-slot log-probabilities of the actions under `theta`.
    pub log_probs: Vec<f64>,
    pub kl_sharpen: f64,
    pub final_state: [Tensor; 4],
}

/// A sampled policy paired with the coefficient on its negative log-likelihood.
pub struct Episode<'a> {
    pub policy: &'a SampledPolicy,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub loss: f64,
    pub nll: f64,
    pub kl_sharpen: f64,
    pub kl_prior: f64,
    /// Gradients keyed `mu/<w>`, `rho/<w>`, `eta/<w>`.
    pub grads: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone)]
pub struct Controller {
    pub cfg: ControllerConfig,
    net: NetShape,
    /// Variational parameters keyed `mu/<w>`, `rho/<w>`, `eta/<w>`.
    vars: ParamSet,
    optimizer: Optimizer,
    pub init_state: [Tensor; 4],
}

fn key(kind: &str, name: &str) -> String {
    format!("{kind}/{name}")
}

/// `rho` such that `softplus(rho) = sigma`.
fn inverse_softplus(sigma: f64) -> f64 {
    sigma.exp_m1().ln()
}

fn normal_like(t: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..t.len()).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(t.shape(), data).expect("same shape")
}

impl Controller {
    pub fn new(slot_sizes: &[usize], cfg: ControllerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if slot_sizes.is_empty() || slot_sizes.contains(&0) {
            return Err(AodError::Contract(format!("invalid slot sizes {slot_sizes:?}")));
        }
        let net = NetShape {
            slot_sizes: slot_sizes.to_vec(),
            hidden: cfg.hidden,
            embed: cfg.embed,
            temperature: cfg.temperature,
            tanh_constant: cfg.tanh_constant,
        };
        let mut vars = ParamSet::new();
        let rho0 = inverse_softplus(cfg.sigma_init);
        for (name, shape) in net.weight_shapes() {
            let n: usize = shape.iter().product();
            let mu = (0..n).map(|_| rng.gen_range(-cfg.init_range..=cfg.init_range)).collect();
            vars.insert(key("mu", &name), Tensor::new(&shape, mu)?.trainable());
            vars.insert(key("rho", &name), Tensor::full(&shape, rho0).trainable());
            vars.insert(key("eta", &name), Tensor::full(&shape, cfg.eta_init).trainable());
        }
        let optimizer = Optimizer::new(OptimizerKind::adam(), cfg.learning_rate)?;
        Ok(Self {
            init_state: zero_state(cfg.hidden),
            cfg,
            net,
            vars,
            optimizer,
        })
    }

    pub fn slot_sizes(&self) -> &[usize] {
        &self.net.slot_sizes
    }

    pub fn net(&self) -> &NetShape {
        &self.net
    }

    pub fn weight_names(&self) -> Vec<String> {
        self.net.weight_shapes().into_iter().map(|(n, _)| n).collect()
    }

    pub fn vars(&self) -> &ParamSet {
        &self.vars
    }

    pub fn vars_mut(&mut self) -> &mut ParamSet {
        &mut self.vars
    }

    fn var(&self, kind: &str, name: &str) -> &Tensor {
        &self.vars[&key(kind, name)]
    }

    pub fn sigma(&self, name: &str) -> Tensor {
        self.var("rho", name).map(softplus)
    }

    /// The posterior means as a concrete weight set.
    pub fn mean_weights(&self) -> ParamSet {
        self.weight_names()
            .into_iter()
            .map(|n| {
                let t = self.var("mu", &n).clone();
                (n, t)
            })
            .collect()
    }

    /// `phi = mu + sigma * eps` for standard normal `eps`.
    pub fn sample_weights(&self, rng: &mut ChaCha8Rng) -> (ParamSet, ParamSet) {
        let mut phi = ParamSet::new();
        let mut eps = ParamSet::new();
        for n in self.weight_names() {
            let mu = self.var("mu", &n);
            let e = normal_like(mu, rng);
            let sigma = self.sigma(&n);
            let mut w = mu.clone();
            for ((w, s), e) in w.data_mut().iter_mut().zip(sigma.data()).zip(e.data()) {
                *w += s * e;
            }
            phi.insert(n.clone(), w.trainable());
            eps.insert(n, e);
        }
        (phi, eps)
    }

    pub fn unroll(&self, weights: &ParamSet, decode: Decode<'_>) -> Result<Unrolled> {
        unroll(&self.net, weights, &state_feed(&self.init_state), decode)
    }

    /// Total log-probability of `actions` and its gradient with respect to the weights.
    pub fn log_prob_grad(&self, weights: &ParamSet, actions: &[usize]) -> Result<(Vec<f64>, ParamSet)> {
        let u = self.unroll(weights, Decode::Given(actions))?;
        let feed = state_feed(&self.init_state);
        let eval = u.graph.forward(weights, &feed, Mode::Eval)?;
        let per_slot = u.log_probs.iter().map(|&id| eval.value(id).item()).collect();
        let grads = u.graph.backward(&eval, u.total)?.into_params();
        Ok((per_slot, grads))
    }

    /// Per-slot probability vectors under `weights` for teacher-forced `actions`.
    pub fn distributions(&self, weights: &ParamSet, actions: &[usize]) -> Result<Vec<Vec<f64>>> {
        let u = self.unroll(weights, Decode::Given(actions))?;
        let feed = state_feed(&self.init_state);
        let eval = u.graph.forward(weights, &feed, Mode::Eval)?;
        Ok(u
            .logits
            .iter()
            .map(|&id| {
                let z = eval.value(id).data();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            })
            .collect())
    }

    /// Greedy decoding under the posterior means.
    pub fn greedy(&self) -> Result<Vec<usize>> {
        Ok(self.unroll(&self.mean_weights(), Decode::Greedy)?.actions)
    }

    /// Samples actions under the posterior means, returning them with the
    /// final recurrent state.
    pub fn sample_from_mean(&self, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, [Tensor; 4])> {
        let w = self.mean_weights();
        let u = self.unroll(&w, Decode::Sample(rng))?;
        let feed = state_feed(&self.init_state);
        let eval = u.graph.forward(&w, &feed, Mode::Eval)?;
        Ok((u.actions, u.final_state.map(|id| eval.value(id).clone())))
    }

    /// `theta = phi - eta * g + sigma_prior * eps_sharp` and the closed-form
    /// `KL[N(phi - eta g, sigma_prior^2) || N(phi, sigma_prior^2)]`.
    pub fn sharpen(&self, phi: &ParamSet, g: &ParamSet, eps_sharp: &ParamSet) -> (ParamSet, f64) {
        let sp = self.cfg.sigma_prior;
        let mut theta = ParamSet::new();
        let mut kl = 0.0;
        for (n, w) in phi {
            let (eta, g, e) = (self.var("eta", n), &g[n], &eps_sharp[n]);
            let mut t = w.clone();
            for i in 0..t.len() {
                let shift = eta.data()[i] * g.data()[i];
                kl += gaussian_kl(w.data()[i] - shift, sp, w.data()[i], sp);
                t.data_mut()[i] += -shift + sp * e.data()[i];
            }
            theta.insert(n.clone(), t);
        }
        (theta, kl)
    }

    /// Draws `phi`, samples actions under it, sharpens towards those actions
    /// and scores them under the sharpened weights.
    pub fn sample_policy(&self, rng: &mut ChaCha8Rng) -> Result<SampledPolicy> {
        let (phi, eps) = self.sample_weights(rng);
        let u = self.unroll(&phi, Decode::Sample(rng))?;
        let feed = state_feed(&self.init_state);
        let final_state = {
            let eval = u.graph.forward(&phi, &feed, Mode::Eval)?;
            u.final_state.map(|id| eval.value(id).clone())
        };
        let actions = u.actions;
        let (_, grad) = self.log_prob_grad(&phi, &actions)?;
        let eps_sharp: ParamSet = phi.iter().map(|(n, t)| (n.clone(), normal_like(t, rng))).collect();
        // g is the gradient of -log p, the negation of what backward returned
        let data_grad: ParamSet = grad.into_iter().map(|(n, t)| (n, t.map(|v| -v))).collect();
        let finite = data_grad.values().all(Tensor::is_finite);
        let (theta, kl_sharpen, data_grad) = if finite {
            let (theta, kl) = self.sharpen(&phi, &data_grad, &eps_sharp);
            (theta, kl, Some(data_grad))
        } else {
            (phi.clone(), 0.0, None)
        };
        let theta: ParamSet = theta.into_iter().map(|(n, t)| (n, t.trainable())).collect();
        let (log_probs, _) = self.log_prob_grad(&theta, &actions)?;
        Ok(SampledPolicy {
            actions,
            eps,
            eps_sharp,
            data_grad,
            theta,
            log_probs,
            kl_sharpen,
            final_state,
        })
    }

    /// Rebuilds `theta` of a sampled policy from the current variational
    /// parameters and its frozen noise and data gradient.
    pub fn rebuild_theta(&self, p: &SampledPolicy) -> ParamSet {
        let sp = self.cfg.sigma_prior;
        self.weight_names()
            .into_iter()
            .map(|n| {
                let mu = self.var("mu", &n);
                let sigma = self.sigma(&n);
                let eta = self.var("eta", &n);
                let eps = p.eps[&n].data();
                let mut t = mu.clone();
                let out = t.data_mut();
                for i in 0..out.len() {
                    out[i] += sigma.data()[i] * eps[i];
                }
                if let Some(g) = &p.data_grad {
                    let (g, es) = (g[&n].data(), p.eps_sharp[&n].data());
                    for i in 0..out.len() {
                        out[i] += -eta.data()[i] * g[i] + sp * es[i];
                    }
                }
                (n, t.trainable())
            })
            .collect()
    }

    /// `KL[q(phi) || p(phi)]` summed over every weight.
    pub fn prior_kl(&self) -> f64 {
        let s0 = self.cfg.hyperprior_std;
        let mut kl = 0.0;
        for n in self.weight_names() {
            let sigma = self.sigma(&n);
            for (m, s) in self.var("mu", &n).data().iter().zip(sigma.data()) {
                kl += gaussian_kl(*m, *s, 0.0, s0);
            }
        }
        kl
    }

    /// `(1/n) sum_k [w_k * (-log p(a_k | theta_k)) + KL_sharpen_k] + KL_prior / c`
    /// with its gradient, holding every episode's noise and data gradient fixed.
    pub fn variational_loss(&self, episodes: &[Episode<'_>], c: f64) -> Result<LossReport> {
        if episodes.is_empty() || !(c > 0.0) {
            return Err(AodError::Contract("need at least one episode and c > 0".into()));
        }
        let n = episodes.len() as f64;
        let sp2 = self.cfg.sigma_prior.powi(2);
        let s0 = self.cfg.hyperprior_std;
        let mut grads: BTreeMap<String, Tensor> = self.vars.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        let (mut nll, mut kl_sharpen) = (0.0, 0.0);
        for ep in episodes {
            let p = ep.policy;
            let theta = self.rebuild_theta(p);
            let (lp, g_theta) = self.log_prob_grad(&theta, &p.actions)?;
            nll += -ep.weight * lp.iter().sum::<f64>() / n;
            for name in self.weight_names() {
                let rho = self.var("rho", &name);
                let eta = self.var("eta", &name);
                let g_t = &g_theta[&name];
                let len = g_t.len();
                let mut d_mu = vec![0.0; len];
                let mut d_rho = vec![0.0; len];
                let mut d_eta = vec![0.0; len];
                let (gt, eps, rho, eta) = (g_t.data(), p.eps[&name].data(), rho.data(), eta.data());
                let dg = p.data_grad.as_ref().map(|g| g[&name].data());
                for i in 0..len {
                    // d loss / d theta for this episode
                    let dt = -ep.weight * gt[i] / n;
                    d_mu[i] = dt;
                    d_rho[i] = dt * eps[i] * sigmoid(rho[i]);
                    if let Some(dg) = dg {
                        let (gi, e) = (dg[i], eta[i]);
                        kl_sharpen += (e * gi).powi(2) / (2.0 * sp2) / n;
                        d_eta[i] = -dt * gi + e * gi * gi / sp2 / n;
                    }
                }
                for (kind, d) in [("mu", d_mu), ("rho", d_rho), ("eta", d_eta)] {
                    let acc = grads.get_mut(&key(kind, &name)).expect("all keys present");
                    for (a, v) in acc.data_mut().iter_mut().zip(d) {
                        *a += v;
                    }
                }
            }
        }
        let kl_prior = self.prior_kl();
        for name in self.weight_names() {
            let rho = self.var("rho", &name).clone();
            let mu = self.var("mu", &name).clone();
            let gm = grads.get_mut(&key("mu", &name)).expect("mu");
            for (g, m) in gm.data_mut().iter_mut().zip(mu.data()) {
                *g += m / (s0 * s0) / c;
            }
            let gr = grads.get_mut(&key("rho", &name)).expect("rho");
            for (g, r) in gr.data_mut().iter_mut().zip(rho.data()) {
                let s = softplus(*r);
                *g += (-1.0 / s + s / (s0 * s0)) * sigmoid(*r) / c;
            }
        }
        Ok(LossReport {
            loss: nll + kl_sharpen + kl_prior / c,
            nll,
            kl_sharpen,
            kl_prior,
            grads,
        })
    }

    /// One Adam step on the variational parameters; `eta` is kept non-negative.
    pub fn apply(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.optimizer.step(&mut self.vars, grads)?;
        for (k, t) in self.vars.iter_mut() {
            if k.starts_with("eta/") {
                t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(())
    }

    /// REINFORCE step combined with the variational loss: each episode's
    /// negative log-likelihood is weighted by `1 + (r_k - b)`.
    pub fn reinforce_update(&mut self, policies: &[SampledPolicy], rewards: &[f64], baseline: f64, c: f64) -> Result<LossReport> {
        if policies.len() != rewards.len() {
            return Err(AodError::Contract("one reward per policy".into()));
        }
        let episodes: Vec<Episode<'_>> = policies
            .iter()
            .zip(rewards)
            .map(|(p, r)| Episode {
                policy: p,
                weight: 1.0 + (r - baseline),
            })
            .collect();
        let report = self.variational_loss(&episodes, c)?;
        self.apply(&report.grads)?;
        Ok(report)
    }

    /// Gradient of the self-imitation loss `(1/n) sum -log pi(a | mu) * max(r - b, 0)`
    /// with respect to the means. Entries at or below the baseline are never
    /// evaluated; `None` when no entry is above it.
    pub fn imitation_grads(&self, entries: &[(Vec<usize>, f64)], baseline: f64) -> Result<Option<BTreeMap<String, Tensor>>> {
        let n = entries.len() as f64;
        let w = self.mean_weights();
        let mut grads: Option<BTreeMap<String, Tensor>> = None;
        for (actions, r) in entries {
            let adv = r - baseline;
            if !(adv > 0.0) {
                continue;
            }
            let (_, g) = self.log_prob_grad(&w, actions)?;
            let acc = grads.get_or_insert_with(BTreeMap::new);
            for (name, t) in g {
                acc.entry(key("mu", &name))
                    .or_insert_with(|| Tensor::zeros(t.shape()))
                    .axpy(-adv / n, &t);
            }
        }
        Ok(grads)
    }

    /// One self-imitation step; returns false when it was skipped.
    pub fn imitation_update(&mut self, entries: &[(Vec<usize>, f64)], baseline: f64) -> Result<bool> {
        match self.imitation_grads(entries, baseline)? {
            Some(grads) => {
                self.apply(&grads)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    /// Named tensors for checkpoints: `ctrl/mu/`, `ctrl/rho/`, `ctrl/eta/` and `ctrl/init/`.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.vars.iter().map(|(k, t)| (format!("ctrl/{k}"), t.clone())).collect();
        for (n, t) in STATE_NAMES.iter().zip(&self.init_state) {
            out.push((format!("ctrl/{n}"), t.clone()));
        }
        out
    }

    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        for (k, t) in tensors {
            let Some(rest) = k.strip_prefix("ctrl/") else { continue };
            if let Some(i) = STATE_NAMES.iter().position(|n| *n == rest) {
                self.init_state[i] = t.clone();
                continue;
            }
            let slot = self
                .vars
                .get_mut(rest)
                .ok_or_else(|| AodError::Contract(format!("unknown controller tensor `{k}`")))?;
            if slot.shape() != t.shape() {
                return Err(AodError::Contract(format!("shape mismatch for `{k}`")));
            }
            *slot = t.clone().trainable();
        }
        Ok(())
    }
}
