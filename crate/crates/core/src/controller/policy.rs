//! The recurrent policy unrolled over action slots for one concrete weight draw.

use aod_substrate::ops::{Act, Activation, Add, Gather, LogSoftmax, LstmCell, Pick, Scale, SliceCols};
use aod_substrate::{Feed, Graph, Mode, NodeId, ParamSet, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AodError, Result};

/// Names of the initial recurrent state inputs: layer-1 h and c, layer-2 h and c.
pub const STATE_NAMES: [&str; 4] = ["init/h1", "init/c1", "init/h2", "init/c2"];

#[derive(Debug, Clone, PartialEq)]
pub struct NetShape {
    pub slot_sizes: Vec<usize>,
    pub hidden: usize,
    pub embed: usize,
    pub temperature: f64,
    pub tanh_constant: f64,
}

impl NetShape {
    /// Every weight tensor of the policy with its shape, in a fixed order.
    pub fn weight_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, e) = (self.hidden, self.embed);
        let mut out = vec![
            ("start".to_string(), vec![1, e]),
            ("lstm1/weight".to_string(), vec![4 * h, e + h]),
            ("lstm1/bias".to_string(), vec![4 * h]),
            ("lstm2/weight".to_string(), vec![4 * h, 2 * h]),
            ("lstm2/bias".to_string(), vec![4 * h]),
        ];
        let last = self.slot_sizes.len().saturating_sub(1);
        for (t, &v) in self.slot_sizes.iter().enumerate() {
            out.push((format!("head{t:02}/weight"), vec![v, h]));
            out.push((format!("head{t:02}/bias"), vec![v]));
            if t < last {
                out.push((format!("emb{t:02}"), vec![v, e]));
            }
        }
        out
    }
}

pub enum Decode<'a> {
    /// Teacher-forced on known actions.
    Given(&'a [usize]),
    Sample(&'a mut ChaCha8Rng),
    Greedy,
}

/// A policy graph whose embedding lookups are fixed to one action sequence.
pub struct Unrolled {
    pub graph: Graph,
    pub actions: Vec<usize>,
    pub logits: Vec<NodeId>,
    pub log_probs: Vec<NodeId>,
    pub total: NodeId,
    pub final_state: [NodeId; 4],
}

fn draw(logp: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logp.len() - 1
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Unrolls the policy slot by slot. When actions are chosen here, the graph is
/// evaluated up to each slot's distribution before the next lookup is added.
pub fn unroll(net: &NetShape, weights: &ParamSet, init: &Feed, mut decode: Decode<'_>) -> Result<Unrolled> {
    if let Decode::Given(a) = &decode {
        if a.len() != net.slot_sizes.len() {
            return Err(AodError::Contract(format!(
                "{} actions for {} slots",
                a.len(),
                net.slot_sizes.len()
            )));
        }
    }
    let h = net.hidden;
    let mut g = Graph::new();
    let mut state: Vec<NodeId> = STATE_NAMES.iter().map(|n| g.input(n, &[1, h])).collect();
    let shapes: std::collections::HashMap<String, Vec<usize>> = net.weight_shapes().into_iter().collect();
    let p = |g: &mut Graph, name: &str| g.param(name, &shapes[name]);
    let w1 = p(&mut g, "lstm1/weight");
    let b1 = p(&mut g, "lstm1/bias");
    let w2 = p(&mut g, "lstm2/weight");
    let b2 = p(&mut g, "lstm2/bias");
    let mut x = p(&mut g, "start");
    let mut actions = Vec::with_capacity(net.slot_sizes.len());
    let mut logits = Vec::new();
    let mut log_probs = Vec::new();
    for t in 0..net.slot_sizes.len() {
        let o1 = g.apply(LstmCell, &[x, state[0], state[1], w1, b1])?;
        state[0] = g.apply(SliceCols { start: 0, len: h }, &[o1])?;
        state[1] = g.apply(SliceCols { start: h, len: h }, &[o1])?;
        let o2 = g.apply(LstmCell, &[state[0], state[2], state[3], w2, b2])?;
        state[2] = g.apply(SliceCols { start: 0, len: h }, &[o2])?;
        state[3] = g.apply(SliceCols { start: h, len: h }, &[o2])?;
        let hw = p(&mut g, &format!("head{t:02}/weight"));
        let hb = p(&mut g, &format!("head{t:02}/bias"));
        let z = g.apply(aod_substrate::ops::Dense, &[state[2], hw, hb])?;
        let z = g.apply(Scale(1.0 / net.temperature), &[z])?;
        let z = g.apply(Act(Activation::Tanh), &[z])?;
        let z = g.apply_labeled(&format!("logits{t:02}"), Scale(net.tanh_constant), &[z])?;
        let lp = g.apply(LogSoftmax, &[z])?;
        let a = match &mut decode {
            Decode::Given(a) => a[t],
            Decode::Sample(rng) => {
                let eval = g.forward_until(weights, init, Mode::Eval, lp)?;
                draw(eval.value(lp).data(), rng)
            }
            Decode::Greedy => {
                let eval = g.forward_until(weights, init, Mode::Eval, lp)?;
                argmax(eval.value(lp).data())
            }
        };
        if a >= net.slot_sizes[t] {
            return Err(AodError::Decode {
                slot: t,
                detail: format!("action {a} outside vocabulary of {}", net.slot_sizes[t]),
            });
        }
        actions.push(a);
        logits.push(z);
        log_probs.push(g.apply(Pick { indices: vec![a] }, &[lp])?);
        if t + 1 < net.slot_sizes.len() {
            let emb = p(&mut g, &format!("emb{t:02}"));
            x = g.apply(Gather { indices: vec![a] }, &[emb])?;
        }
    }
    let mut total = log_probs[0];
    for &lp in &log_probs[1..] {
        total = g.apply(Add, &[total, lp])?;
    }
    Ok(Unrolled {
        graph: g,
        actions,
        logits,
        log_probs,
        total,
        final_state: [state[0], state[1], state[2], state[3]],
    })
}

/// Zero initial state.
pub fn zero_state(hidden: usize) -> [Tensor; 4] {
    std::array::from_fn(|_| Tensor::zeros(&[1, hidden]))
}

pub fn state_feed(state: &[Tensor; 4]) -> Feed {
    STATE_NAMES
        .iter()
        .zip(state)
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
}
