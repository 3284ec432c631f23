//! Self-imitation buffer and the moving-average reward baseline.

use serde::{Deserialize, Serialize};

use crate::error::{AodError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferEvent {
    Inserted,
    /// The sequence was already stored and its reward was raised.
    Improved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub actions: Vec<usize>,
    pub reward: f64,
}

/// Best distinct action sequences seen so far, sorted by reward descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: Vec<ReplayEntry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(AodError::Config("buffer capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            entries: Vec::with_capacity(capacity + 1),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn min_reward(&self) -> Option<f64> {
        self.entries.last().map(|e| e.reward)
    }

    /// `(actions, reward)` pairs in buffer order.
    pub fn pairs(&self) -> Vec<(Vec<usize>, f64)> {
        self.entries.iter().map(|e| (e.actions.clone(), e.reward)).collect()
    }

    pub fn insert(&mut self, actions: &[usize], reward: f64) -> Result<BufferEvent> {
        if !reward.is_finite() {
            return Err(AodError::Numeric(format!("replay reward {reward}")));
        }
        if let Some(i) = self.entries.iter().position(|e| e.actions == actions) {
            if reward <= self.entries[i].reward {
                return Ok(BufferEvent::Rejected);
            }
            self.entries.remove(i);
            self.place(actions, reward);
            return Ok(BufferEvent::Improved);
        }
        if self.is_full() && self.min_reward().is_some_and(|m| reward <= m) {
            return Ok(BufferEvent::Rejected);
        }
        self.place(actions, reward);
        self.entries.truncate(self.capacity);
        Ok(BufferEvent::Inserted)
    }

    /// Inserts after every entry with a reward at least as high, so earlier
    /// arrivals win ties.
    fn place(&mut self, actions: &[usize], reward: f64) {
        let at = self.entries.partition_point(|e| e.reward >= reward);
        self.entries.insert(
            at,
            ReplayEntry {
                actions: actions.to_vec(),
                reward,
            },
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: f64,
    pub decay: f64,
}

impl Baseline {
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(AodError::Config(format!("baseline decay {decay} outside [0, 1)")));
        }
        Ok(Self { value: 0.0, decay })
    }

    /// `b <- decay * b + (1 - decay) * mean(rewards)`
    pub fn update(&mut self, rewards: &[f64]) -> Result<f64> {
        if rewards.is_empty() {
            return Err(AodError::Contract("baseline update needs rewards".into()));
        }
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        self.value = self.decay * self.value + (1.0 - self.decay) * mean;
        if !self.value.is_finite() {
            return Err(AodError::Numeric(format!("baseline {}", self.value)));
        }
        Ok(self.value)
    }
}
