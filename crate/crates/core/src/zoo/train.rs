//! Minibatch training of a child on the shared store, and validation scoring.

use aod_substrate::{Mode, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hypothesis::HypothesisState;
use super::model::{ChildModel, ScoreMap};
use super::store::ParamStore;
use super::ZooConfig;
use crate::data::Dataset;
use crate::error::{AodError, Result};
use crate::metrics::auroc;
use crate::space::ModelSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Loss of every completed step, measured before its update.
    pub losses: Vec<f64>,
    /// Set when training stopped on a non-finite or exploding loss.
    pub failure: Option<String>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Cycles through shuffled permutations of `0..n`.
struct Batches {
    order: Vec<usize>,
    cursor: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            size: size.min(n),
            rng,
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.cursor + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let b = self.order[self.cursor..self.cursor + self.size].to_vec();
        self.cursor += self.size;
        b
    }
}

impl ChildModel {
    /// Fits the hypothesis state to the latent codes of `batch`.
    pub fn init_state(&mut self, store: &ParamStore, batch: &Tensor, cfg: &ZooConfig) -> Result<()> {
        let z = self.latent(store, batch, Mode::Train)?;
        self.state = Some(HypothesisState::init(self.spec.hypothesis, z.data(), z.row_len(), &cfg.hypothesis())?);
        Ok(())
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    pub fn train_step(&mut self, store: &mut ParamStore, batch: &Tensor, cfg: &ZooConfig) -> Result<f64> {
        if self.state.is_none() {
            self.init_state(store, batch, cfg)?;
        }
        let feed = self.feed(batch)?;
        let graph = self.graph();
        let eval = graph.forward(store.params(), &feed, Mode::Train)?;
        let loss = eval.value(self.loss_node()).item();
        if !loss.is_finite() || loss > cfg.divergence_threshold {
            return Err(AodError::Numeric(format!("training loss {loss}")));
        }
        let grads = graph.backward(&eval, self.loss_node())?.into_params();
        let latent = eval.value(self.latent_node()).clone();
        let updates = eval.into_updates();
        store.step(&grads)?;
        for (key, value) in updates {
            store.replace(&key, value)?;
        }
        if let Some(state) = self.state.as_mut() {
            state.update(latent.data(), &cfg.hypothesis())?;
        }
        Ok(loss)
    }

    /// Scores a whole dataset in fixed chunks.
    pub fn score_dataset(&self, store: &ParamStore, data: &Dataset, chunk: usize, with_pixels: bool) -> Result<ScoreMap> {
        let mut all = ScoreMap {
            scores: Vec::with_capacity(data.len()),
            distances: Vec::with_capacity(data.len()),
            regularizers: Vec::with_capacity(data.len()),
            pixels: with_pixels.then(Vec::new),
        };
        let idx: Vec<usize> = (0..data.len()).collect();
        for part in idx.chunks(chunk.max(1)) {
            let s = self.score(store, &data.batch(part)?, with_pixels)?;
            all.scores.extend(s.scores);
            all.distances.extend(s.distances);
            all.regularizers.extend(s.regularizers);
            if let (Some(acc), Some(p)) = (all.pixels.as_mut(), s.pixels) {
                acc.extend(p);
            }
        }
        Ok(all)
    }
}

/// Trains `model` for `steps` minibatches of `train`, writing parameters back
/// into `store`. Divergence ends training early and is reported, not raised.
pub fn train_child(
    model: &mut ChildModel,
    store: &mut ParamStore,
    train: &Dataset,
    steps: usize,
    cfg: &ZooConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train_loop(model, store, train, steps, cfg, seed, None)
}

/// Like [`train_child`], starting at `cfg.learning_rate` and dividing it by 10
/// at each fraction of `steps` listed in `drops`.
pub fn train_child_scheduled(
    model: &mut ChildModel,
    store: &mut ParamStore,
    train: &Dataset,
    steps: usize,
    cfg: &ZooConfig,
    drops: &[f64],
    seed: u64,
) -> Result<TrainOutcome> {
    let lr = |step: usize| {
        let progress = step as f64 / steps.max(1) as f64;
        cfg.learning_rate * 0.1f64.powi(drops.iter().filter(|&&d| progress >= d).count() as i32)
    };
    train_loop(model, store, train, steps, cfg, seed, Some(&lr))
}

fn train_loop(
    model: &mut ChildModel,
    store: &mut ParamStore,
    train: &Dataset,
    steps: usize,
    cfg: &ZooConfig,
    seed: u64,
    lr: Option<&dyn Fn(usize) -> f64>,
) -> Result<TrainOutcome> {
    if steps == 0 {
        return Ok(TrainOutcome {
            losses: Vec::new(),
            failure: None,
        });
    }
    if train.is_empty() {
        return Err(AodError::Contract("empty training set".into()));
    }
    let mut batches = Batches::new(train.len(), cfg.batch_size, seed);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        if let Some(lr) = lr {
            store.set_learning_rate(lr(step))?;
        }
        let batch = train.batch(&batches.next())?;
        match model.train_step(store, &batch, cfg) {
            Ok(loss) => losses.push(loss),
            Err(e @ (AodError::Numeric(_) | AodError::Substrate(_))) => {
                return Ok(TrainOutcome {
                    losses,
                    failure: Some(e.to_string()),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutcome { losses, failure: None })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildReport {
    pub spec: ModelSpec,
    /// Validation AUROC, or 0 when the child failed.
    pub reward: f64,
    pub final_loss: Option<f64>,
    pub failure: Option<String>,
}

/// Builds, trains and scores one child. Any failure after the spec is known
/// yields reward 0 with the reason recorded.
pub fn evaluate_child(
    spec: &ModelSpec,
    store: &mut ParamStore,
    train: &Dataset,
    valid: &Dataset,
    steps: usize,
    cfg: &ZooConfig,
    seed: u64,
) -> ChildReport {
    let run = |store: &mut ParamStore| -> Result<(f64, TrainOutcome)> {
        let mut model = ChildModel::build(spec, train.shape(), store, cfg)?;
        let outcome = train_child(&mut model, store, train, steps, cfg, seed)?;
        if outcome.failure.is_some() {
            return Ok((0.0, outcome));
        }
        if model.state.is_none() {
            let n = cfg.batch_size.min(train.len());
            let first: Vec<usize> = (0..n).collect();
            model.init_state(store, &train.batch(&first)?, cfg)?;
        }
        let scores = model.score_dataset(store, valid, cfg.eval_chunk, false)?;
        Ok((auroc(&scores.scores, &valid.labels_or_inliers())?, outcome))
    };
    match run(store) {
        Ok((reward, outcome)) => ChildReport {
            spec: spec.clone(),
            reward,
            final_loss: outcome.final_loss(),
            failure: outcome.failure,
        },
        Err(e) => ChildReport {
            spec: spec.clone(),
            reward: 0.0,
            final_loss: None,
            failure: Some(e.to_string()),
        },
    }
}
