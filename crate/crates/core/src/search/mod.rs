//! The search loop: controller-sampled children, shaped rewards, REINFORCE
//! and self-imitation updates, top-K state feedback, and a random baseline.

mod finalize;
mod log;
mod replay;

use std::time::Instant;

use aod_substrate::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{intrinsic_reward, Controller, ControllerConfig, SampledPolicy};
use crate::data::{Dataset, Splits};
use crate::error::{AodError, Result};
use crate::metrics::{aupr, auroc, rpro, Metric, PositiveClass};
use crate::space::{self, ActionSequence, ModelSpec};
use crate::zoo::{conv_macs, train_child, ChildModel, ParamStore, ZooConfig};

pub use finalize::{score_split, train_final, SplitScores, RPRO_THRESHOLDS};
pub use log::{
    format_top, Phase, SearchLog, StepRecord, SummaryRow, Timing, TopEntry, LOG_FILE, SUMMARY_FILE, SUMMARY_WINDOW,
    TIMING_FILE, TOP5_FILE,
};
pub use replay::{Baseline, BufferEvent, ReplayBuffer, ReplayEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Encoder depth N of every child.
    pub layers: usize,
    pub epochs: usize,
    pub children_per_step: usize,
    /// Candidates M scored without training at the end of each epoch.
    pub candidates: usize,
    /// Candidates K whose final controller states seed the next epoch.
    pub top_k: usize,
    pub eta_explore: f64,
    pub buffer_capacity: usize,
    pub baseline_decay: f64,
    /// Optimizer steps given to every trained child.
    pub child_steps: usize,
    /// Retrain the best buffered child once per epoch.
    pub replay: bool,
    /// Stop after this many trained children; defaults to the epoch count.
    pub max_evaluations: Option<usize>,
    /// Fractions of the run after which the child learning rate drops by 10.
    pub lr_drops: Vec<f64>,
    pub metric: Metric,
    /// Children above this many convolution MACs per sample get reward 0
    /// without training.
    pub max_child_macs: Option<u64>,
    /// Also score every trained child on the test split (logged only).
    pub record_test: bool,
    pub workers: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            layers: space::DEFAULT_LAYERS,
            epochs: 500,
            children_per_step: 5,
            candidates: 10,
            top_k: 3,
            eta_explore: 0.01,
            buffer_capacity: 10,
            baseline_decay: 0.95,
            child_steps: 100,
            replay: true,
            max_evaluations: None,
            lr_drops: vec![0.5, 0.75],
            metric: Metric::Auroc,
            max_child_macs: None,
            record_test: false,
            workers: 1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(AodError::Config(what));
        if self.layers == 0 || self.epochs == 0 || self.children_per_step == 0 || self.buffer_capacity == 0 {
            return bad("layers, epochs, children_per_step and buffer_capacity must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        if self.top_k > self.candidates {
            return bad(format!("top_k {} exceeds candidates {}", self.top_k, self.candidates));
        }
        if self.candidates > 0 && self.top_k == 0 {
            return bad("top_k must be positive when candidates are sampled".into());
        }
        if !(self.eta_explore >= 0.0 && self.eta_explore.is_finite()) {
            return bad("eta_explore must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad("baseline_decay must be in [0, 1)".into());
        }
        if self.lr_drops.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return bad("lr_drops must lie in [0, 1]".into());
        }
        if self.max_evaluations == Some(0) {
            return bad("max_evaluations must be positive".into());
        }
        space::slot_sizes(self.layers)?;
        Ok(())
    }

    fn per_epoch(&self) -> usize {
        self.children_per_step + usize::from(self.replay)
    }

    /// Trained children in a run; the same number for both search kinds.
    pub fn total_evaluations(&self) -> usize {
        self.max_evaluations.unwrap_or(self.epochs * self.per_epoch())
    }

    /// Learning-rate multiplier after `progress` of the run.
    pub fn lr_factor(&self, progress: f64) -> f64 {
        let drops = self.lr_drops.iter().filter(|&&d| progress >= d).count();
        0.1f64.powi(drops as i32)
    }
}

/// Derives independent stream seeds from the run seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_CONTROLLER: u64 = 1;
const STREAM_SAMPLING: u64 = 2;
const STREAM_CHILD: u64 = 3;
const STREAM_STORE: u64 = 4;
const STREAM_RANDOM: u64 = 5;

pub fn reward_metric(metric: Metric, scores: &[f64], labels: &[bool]) -> Result<f64> {
    match metric {
        Metric::Auroc => auroc(scores, labels),
        Metric::AuprIn => aupr(scores, labels, PositiveClass::In),
        Metric::AuprOut => aupr(scores, labels, PositiveClass::Out),
        Metric::Rpro => Err(AodError::Config("rpro is not an image-level metric".into())),
    }
}

/// Scores `data` with `model` under `metric`; rpro uses the pixel maps and
/// the split's defect masks.
pub fn child_reward(metric: Metric, model: &ChildModel, store: &ParamStore, data: &Dataset, chunk: usize) -> Result<f64> {
    if metric != Metric::Rpro {
        let s = model.score_dataset(store, data, chunk, false)?;
        return reward_metric(metric, &s.scores, &data.labels_or_inliers());
    }
    let masks = data
        .masks
        .as_ref()
        .ok_or_else(|| AodError::Contract("rpro needs defect masks".into()))?;
    let maps = model
        .score_dataset(store, data, chunk, true)?
        .pixels
        .ok_or_else(|| AodError::Contract("model produced no pixel maps".into()))?;
    let [_, h, w] = data.shape();
    rpro(&maps, masks, h, w, RPRO_THRESHOLDS)
}

/// Everything the orchestrator learns from one trained child.
#[derive(Debug, Clone, PartialEq)]
pub struct ChildResult {
    pub reward: f64,
    pub test_reward: Option<f64>,
    pub train_loss: Option<f64>,
    pub failure: Option<String>,
    /// Store keys the child read or wrote.
    pub keys: Vec<String>,
}

/// Builds, trains and scores one child on `store`. Failures give reward 0.
pub fn run_child(
    spec: &ModelSpec,
    store: &mut ParamStore,
    splits: &Splits,
    steps: usize,
    zoo: &ZooConfig,
    cfg: &SearchConfig,
    seed: u64,
) -> ChildResult {
    let mut keys = Vec::new();
    let mut run = |store: &mut ParamStore| -> Result<(f64, Option<f64>, Option<f64>, Option<String>)> {
        if let Some(cap) = cfg.max_child_macs {
            let macs = conv_macs(spec, splits.train.shape());
            if macs > cap {
                return Ok((0.0, None, None, Some(format!("{macs} MACs per sample exceed the cap of {cap}"))));
            }
        }
        let mut model = ChildModel::build(spec, splits.train.shape(), store, zoo)?;
        keys = model.param_keys().to_vec();
        let outcome = train_child(&mut model, store, &splits.train, steps, zoo, seed)?;
        let loss = outcome.final_loss();
        if let Some(f) = outcome.failure {
            return Ok((0.0, None, loss, Some(f)));
        }
        if model.state.is_none() {
            let n = zoo.batch_size.min(splits.train.len());
            let first: Vec<usize> = (0..n).collect();
            model.init_state(store, &splits.train.batch(&first)?, zoo)?;
        }
        let reward = child_reward(cfg.metric, &model, store, &splits.valid, zoo.eval_chunk)?;
        let test = if cfg.record_test {
            Some(child_reward(cfg.metric, &model, store, &splits.test, zoo.eval_chunk)?)
        } else {
            None
        };
        Ok((reward, test, loss, None))
    };
    let (reward, test_reward, train_loss, failure) = match run(store) {
        Ok(v) => v,
        Err(e) => (0.0, None, None, Some(e.to_string())),
    };
    ChildResult {
        reward,
        test_reward,
        train_loss,
        failure,
        keys,
    }
}

/// Trains a batch of children. Sequentially they share one store in order;
/// with several workers each trains on its own copy and the copies are merged
/// back in sample order, the later sample winning shared keys.
fn run_children(
    specs: &[(ModelSpec, u64)],
    store: &mut ParamStore,
    splits: &Splits,
    zoo: &ZooConfig,
    cfg: &SearchConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Vec<ChildResult> {
    match pool {
        None => specs
            .iter()
            .map(|(spec, seed)| run_child(spec, store, splits, cfg.child_steps, zoo, cfg, *seed))
            .collect(),
        Some(pool) => {
            let snapshot: &ParamStore = store;
            let done: Vec<(ChildResult, ParamStore)> = pool.install(|| {
                specs
                    .par_iter()
                    .map(|(spec, seed)| {
                        let mut own = snapshot.clone();
                        let r = run_child(spec, &mut own, splits, cfg.child_steps, zoo, cfg, *seed);
                        (r, own)
                    })
                    .collect()
            });
            done.into_iter()
                .map(|(r, own)| {
                    store.merge_from(&own, &r.keys);
                    r
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounters {
    pub reinforce_updates: usize,
    pub imitation_updates: usize,
    /// Imitation phases skipped because no buffered reward beat the baseline.
    pub imitation_skips: usize,
    /// Children whose sharpening was skipped on a non-finite gradient.
    pub sharpen_skips: usize,
    pub candidate_evaluations: usize,
}

pub struct SearchOutcome {
    pub log: SearchLog,
    pub buffer: ReplayBuffer,
    pub store: ParamStore,
    pub controller: Option<Controller>,
    pub counters: RunCounters,
}

fn new_store(zoo: &ZooConfig, seed: u64) -> Result<ParamStore> {
    ParamStore::new(zoo.optimizer_kind(), zoo.learning_rate, derive_seed(seed, STREAM_STORE, 0))
}

fn thread_pool(workers: usize) -> Result<Option<rayon::ThreadPool>> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| AodError::Config(format!("cannot start {workers} workers: {e}")))
}

fn check_splits(splits: &Splits, metric: Metric) -> Result<()> {
    if splits.train.is_empty() || splits.valid.is_empty() {
        return Err(AodError::Contract("search needs non-empty train and valid splits".into()));
    }
    let labels = splits.valid.labels_or_inliers();
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(AodError::Contract("the valid split must contain inliers and outliers".into()));
    }
    if metric == Metric::Rpro && !splits.valid.masks.as_ref().is_some_and(|m| m.iter().flatten().any(|&p| p)) {
        return Err(AodError::Config("the rpro reward needs defect masks on the valid split".into()));
    }
    Ok(())
}

fn mean_state(states: &[&[Tensor; 4]]) -> [Tensor; 4] {
    std::array::from_fn(|i| {
        let mut acc = Tensor::zeros(states[0][i].shape());
        for s in states {
            acc.axpy(1.0 / states.len() as f64, &s[i]);
        }
        acc
    })
}

/// One uniformly drawn token per slot.
pub fn sample_uniform(slot_sizes: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    slot_sizes.iter().map(|&n| rng.gen_range(0..n)).collect()
}

/// Indices of the `k` best rewards, ties to the earlier index.
pub fn top_k_indices(rewards: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rewards.len()).collect();
    idx.sort_by(|&a, &b| rewards[b].total_cmp(&rewards[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn decode_or_describe(actions: &[usize]) -> (Option<ModelSpec>, String) {
    match space::decode(&ActionSequence(actions.to_vec())) {
        Ok(spec) => {
            let s = spec.to_string();
            (Some(spec), s)
        }
        Err(e) => (None, format!("undecodable: {e}")),
    }
}

struct Progress {
    step: usize,
    total: usize,
    started: Instant,
}

impl Progress {
    fn lr(&self, cfg: &SearchConfig, zoo: &ZooConfig) -> f64 {
        zoo.learning_rate * cfg.lr_factor(self.step as f64 / self.total as f64)
    }

    fn remaining(&self) -> usize {
        self.total - self.step
    }
}

/// Curiosity-guided search with self-imitation.
pub fn run_search(cfg: &SearchConfig, zoo: &ZooConfig, ctrl_cfg: &ControllerConfig, splits: &Splits, seed: u64) -> Result<SearchOutcome> {
    cfg.validate()?;
    zoo.validate()?;
    check_splits(splits, cfg.metric)?;
    let pool = thread_pool(cfg.workers)?;
    let slot_sizes = space::slot_sizes(cfg.layers)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_CONTROLLER, 0));
    let mut controller = Controller::new(&slot_sizes, ctrl_cfg.clone(), &mut init_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SAMPLING, 0));
    let mut store = new_store(zoo, seed)?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let mut baseline = Baseline::new(cfg.baseline_decay)?;
    let mut log = SearchLog::default();
    let mut counters = RunCounters::default();
    let mut p = Progress {
        step: 0,
        total: cfg.total_evaluations(),
        started: Instant::now(),
    };
    let episodes = cfg.children_per_step as f64;

    for epoch in 0..cfg.epochs {
        if p.remaining() == 0 {
            break;
        }
        store.set_learning_rate(p.lr(cfg, zoo))?;
        let k = cfg.children_per_step.min(p.remaining());
        let policies: Vec<SampledPolicy> = (0..k).map(|_| controller.sample_policy(&mut rng)).collect::<Result<_>>()?;
        counters.sharpen_skips += policies.iter().filter(|pol| pol.data_grad.is_none()).count();
        let decoded: Vec<(Option<ModelSpec>, String)> = policies.iter().map(|pol| decode_or_describe(&pol.actions)).collect();
        let jobs: Vec<(ModelSpec, u64)> = decoded
            .iter()
            .enumerate()
            .filter_map(|(i, (spec, _))| spec.clone().map(|s| (s, derive_seed(seed, STREAM_CHILD, (p.step + i) as u64))))
            .collect();
        let mut results = run_children(&jobs, &mut store, splits, zoo, cfg, pool.as_ref()).into_iter();
        let b = baseline.value;
        let mut shaped = Vec::with_capacity(k);
        for (pol, (spec, text)) in policies.iter().zip(&decoded) {
            let r = match spec {
                Some(_) => results.next().expect("one result per decodable child"),
                None => ChildResult {
                    reward: 0.0,
                    test_reward: None,
                    train_loss: None,
                    failure: Some(text.clone()),
                    keys: Vec::new(),
                },
            };
            let r_new = intrinsic_reward(r.reward, pol.kl_sharpen, cfg.eta_explore);
            shaped.push(r_new);
            let event = buffer.insert(&pol.actions, r.reward)?;
            log.push(
                StepRecord {
                    step: p.step,
                    epoch,
                    phase: Phase::Search,
                    actions: pol.actions.clone(),
                    spec: text.clone(),
                    raw_reward: r.reward,
                    kl_bonus: r_new - r.reward,
                    shaped_reward: r_new,
                    baseline: b,
                    buffer_event: Some(event),
                    train_loss: r.train_loss,
                    train_steps: cfg.child_steps,
                    failure: r.failure,
                    test_reward: r.test_reward,
                },
                p.started.elapsed().as_secs_f64(),
            )?;
            p.step += 1;
        }
        controller.reinforce_update(&policies, &shaped, b, episodes)?;
        counters.reinforce_updates += 1;
        baseline.update(&shaped)?;

        if controller.imitation_update(&buffer.pairs(), baseline.value)? {
            counters.imitation_updates += 1;
        } else {
            counters.imitation_skips += 1;
        }
        if cfg.replay && p.remaining() > 0 {
            let top = buffer.entries()[0].actions.clone();
            let (spec, text) = decode_or_describe(&top);
            let spec = spec.expect("buffered sequences decode");
            store.set_learning_rate(p.lr(cfg, zoo))?;
            let child_seed = derive_seed(seed, STREAM_CHILD, p.step as u64);
            let r = run_child(&spec, &mut store, splits, cfg.child_steps, zoo, cfg, child_seed);
            let event = buffer.insert(&top, r.reward)?;
            log.push(
                StepRecord {
                    step: p.step,
                    epoch,
                    phase: Phase::Replay,
                    actions: top,
                    spec: text,
                    raw_reward: r.reward,
                    kl_bonus: 0.0,
                    shaped_reward: r.reward,
                    baseline: baseline.value,
                    buffer_event: Some(event),
                    train_loss: r.train_loss,
                    train_steps: cfg.child_steps,
                    failure: r.failure,
                    test_reward: r.test_reward,
                },
                p.started.elapsed().as_secs_f64(),
            )?;
            p.step += 1;
        }

        if cfg.candidates > 0 {
            let mut rewards = Vec::with_capacity(cfg.candidates);
            let mut states = Vec::with_capacity(cfg.candidates);
            for _ in 0..cfg.candidates {
                let (actions, state) = controller.sample_from_mean(&mut rng)?;
                let reward = match decode_or_describe(&actions).0 {
                    Some(spec) => run_child(&spec, &mut store, splits, 0, zoo, cfg, 0).reward,
                    None => 0.0,
                };
                rewards.push(reward);
                states.push(state);
            }
            counters.candidate_evaluations += cfg.candidates;
            let chosen: Vec<&[Tensor; 4]> = top_k_indices(&rewards, cfg.top_k).into_iter().map(|i| &states[i]).collect();
            controller.init_state = mean_state(&chosen);
        }
    }
    Ok(SearchOutcome {
        log,
        buffer,
        store,
        controller: Some(controller),
        counters,
    })
}

/// Uniformly sampled children under the same evaluation pipeline and budget.
pub fn run_random_search(cfg: &SearchConfig, zoo: &ZooConfig, splits: &Splits, seed: u64) -> Result<SearchOutcome> {
    cfg.validate()?;
    zoo.validate()?;
    check_splits(splits, cfg.metric)?;
    let pool = thread_pool(cfg.workers)?;
    let slot_sizes = space::slot_sizes(cfg.layers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_RANDOM, 0));
    let mut store = new_store(zoo, seed)?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let mut log = SearchLog::default();
    let mut p = Progress {
        step: 0,
        total: cfg.total_evaluations(),
        started: Instant::now(),
    };
    let mut epoch = 0;
    while p.remaining() > 0 {
        store.set_learning_rate(p.lr(cfg, zoo))?;
        let k = cfg.per_epoch().min(p.remaining());
        let actions: Vec<Vec<usize>> = (0..k)
            .map(|_| sample_uniform(&slot_sizes, &mut rng))
            .collect();
        let jobs: Vec<(ModelSpec, u64)> = actions
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let spec = space::decode(&ActionSequence(a.clone()))?;
                Ok((spec, derive_seed(seed, STREAM_CHILD, (p.step + i) as u64)))
            })
            .collect::<Result<_>>()?;
        let results = run_children(&jobs, &mut store, splits, zoo, cfg, pool.as_ref());
        for ((a, (spec, _)), r) in actions.into_iter().zip(&jobs).zip(results) {
            let event = buffer.insert(&a, r.reward)?;
            log.push(
                StepRecord {
                    step: p.step,
                    epoch,
                    phase: Phase::Search,
                    actions: a,
                    spec: spec.to_string(),
                    raw_reward: r.reward,
                    kl_bonus: 0.0,
                    shaped_reward: r.reward,
                    baseline: 0.0,
                    buffer_event: Some(event),
                    train_loss: r.train_loss,
                    train_steps: cfg.child_steps,
                    failure: r.failure,
                    test_reward: r.test_reward,
                },
                p.started.elapsed().as_secs_f64(),
            )?;
            p.step += 1;
        }
        epoch += 1;
    }
    Ok(SearchOutcome {
        log,
        buffer,
        store,
        controller: None,
        counters: RunCounters::default(),
    })
}
