//! Per-evaluation search records and the artifacts derived from them.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::replay::BufferEvent;
use crate::error::{AodError, Result};
use crate::space::ModelSpec;

pub const LOG_FILE: &str = "searchlog.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TOP5_FILE: &str = "top5.json";
/// Epochs aggregated into one summary row.
pub const SUMMARY_WINDOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// A child sampled by the controller (or uniformly, for random search).
    Search,
    /// The best buffered child retrained during self-imitation.
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub actions: Vec<usize>,
    pub spec: String,
    pub raw_reward: f64,
    pub kl_bonus: f64,
    pub shaped_reward: f64,
    /// Baseline in effect when the child was rewarded.
    pub baseline: f64,
    pub buffer_event: Option<BufferEvent>,
    pub train_loss: Option<f64>,
    pub train_steps: usize,
    pub failure: Option<String>,
    /// AUROC on the test split, when requested.
    pub test_reward: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub step: usize,
    pub wall_time: f64,
}

/// Append-only record of a run. Wall-clock times live beside the records so
/// the records themselves are reproducible bit for bit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchLog {
    pub records: Vec<StepRecord>,
    pub timings: Vec<Timing>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub rank: usize,
    pub actions: Vec<usize>,
    pub spec: ModelSpec,
    pub reward: f64,
    pub test_reward: Option<f64>,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    /// Last epoch of the window, counted from 1.
    pub epoch: usize,
    pub best: f64,
    pub mean: f64,
    pub std: f64,
}

impl SearchLog {
    pub fn push(&mut self, record: StepRecord, wall_time: f64) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(AodError::Contract(format!("step {} after {}", record.step, last.step)));
            }
        }
        self.timings.push(Timing {
            step: record.step,
            wall_time,
        });
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_train_steps(&self) -> usize {
        self.records.iter().map(|r| r.train_steps).sum()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Best, mean and population std of raw rewards per window of 20 epochs.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut windows: Vec<(usize, Vec<f64>)> = Vec::new();
        for r in &self.records {
            let w = r.epoch / SUMMARY_WINDOW;
            match windows.last_mut() {
                Some((last, v)) if *last == w => v.push(r.raw_reward),
                _ => windows.push((w, vec![r.raw_reward])),
            }
        }
        windows
            .into_iter()
            .map(|(w, v)| {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                let last_epoch = self
                    .records
                    .iter()
                    .filter(|r| r.epoch / SUMMARY_WINDOW == w)
                    .map(|r| r.epoch)
                    .max()
                    .unwrap_or(0);
                SummaryRow {
                    epoch: last_epoch + 1,
                    best: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    mean,
                    std: var.sqrt(),
                }
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("epoch,best,mean,std\n");
        for r in self.summary() {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.best, r.mean, r.std);
        }
        s
    }

    /// The `k` distinct action sequences with the highest validation reward,
    /// each at its best evaluation; ties go to the earlier step.
    pub fn top(&self, k: usize) -> Result<Vec<TopEntry>> {
        let mut best: HashMap<&[usize], &StepRecord> = HashMap::new();
        for r in &self.records {
            let e = best.entry(&r.actions).or_insert(r);
            if r.raw_reward > e.raw_reward {
                *e = r;
            }
        }
        let mut v: Vec<&StepRecord> = best.into_values().collect();
        v.sort_by(|a, b| b.raw_reward.total_cmp(&a.raw_reward).then(a.step.cmp(&b.step)));
        v.into_iter()
            .take(k)
            .enumerate()
            .map(|(i, r)| {
                Ok(TopEntry {
                    rank: i + 1,
                    actions: r.actions.clone(),
                    spec: crate::space::decode(&crate::space::ActionSequence(r.actions.clone()))?,
                    reward: r.raw_reward,
                    test_reward: r.test_reward,
                    step: r.step,
                })
            })
            .collect()
    }

    /// Writes the log, timings, summary and top-5 table into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(LOG_FILE), self.to_jsonl()?)?;
        let mut t = fs::File::create(dir.join(TIMING_FILE))?;
        for timing in &self.timings {
            writeln!(t, "{}", serde_json::to_string(timing)?)?;
        }
        fs::write(dir.join(SUMMARY_FILE), self.summary_csv())?;
        fs::write(dir.join(TOP5_FILE), serde_json::to_string_pretty(&self.top(5)?)?)?;
        Ok(())
    }

    /// Reads `searchlog.jsonl`, and `timing.jsonl` when present.
    pub fn read(dir: &Path) -> Result<Self> {
        let mut log = SearchLog::default();
        let f = fs::File::open(dir.join(LOG_FILE))?;
        for line in BufReader::new(f).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                log.records.push(serde_json::from_str(&line)?);
            }
        }
        if let Ok(f) = fs::File::open(dir.join(TIMING_FILE)) {
            for line in BufReader::new(f).lines() {
                let line = line?;
                if !line.trim().is_empty() {
                    log.timings.push(serde_json::from_str(&line)?);
                }
            }
        }
        Ok(log)
    }
}

/// Plain-text table of the top entries for terminal output.
pub fn format_top(entries: &[TopEntry]) -> String {
    let mut s = String::from("rank  reward  test    step  spec\n");
    for e in entries {
        let test = e.test_reward.map_or("-".to_string(), |t| format!("{t:.4}"));
        let _ = writeln!(s, "{:<5} {:.4}  {:<6}  {:<5} {}", e.rank, e.reward, test, e.step, e.spec);
    }
    s
}
