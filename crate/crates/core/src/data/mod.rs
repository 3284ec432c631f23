//! Datasets: synthetic generators, outlier planting, IDX files and manifests.

mod idx;
mod persist;
mod split;
mod synth;

use aod_substrate::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AodError, Result};

pub use idx::{encode_idx, load_idx, parse_idx, parse_idx_raw, write_idx};
pub use persist::{load_splits, save_splits, DatasetManifest, SplitManifest};
pub use split::{plant_outliers, SplitPlan, Splits};
pub use synth::{make_indist, synth_defects, synth_noise, Family, NoiseKind, DEFECT_VALUE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    In,
    Out,
}

/// Where a sample came from, for index audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Origin {
    pub source: Source,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
}

/// A set of equally shaped `(C, H, W)` images with optional labels and masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    data: Vec<f64>,
    pub labels: Option<Vec<bool>>,
    /// Per-sample `H * W` defect masks.
    pub masks: Option<Vec<Vec<bool>>>,
    pub origins: Vec<Origin>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(shape: [usize; 3], data: Vec<f64>, provenance: Provenance) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || data.len() % per != 0 {
            return Err(AodError::Contract(format!(
                "{} values do not split into samples of shape {shape:?}",
                data.len()
            )));
        }
        let n = data.len() / per;
        Ok(Self {
            shape,
            data,
            labels: None,
            masks: None,
            origins: (0..n).map(|index| Origin { source: Source::In, index }).collect(),
            provenance,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.sample_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// Samples `indices` stacked into a `[B, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            if i >= self.len() {
                return Err(AodError::Contract(format!("sample {i} out of range for {}", self.len())));
            }
            data.extend_from_slice(self.sample(i));
        }
        let [c, h, w] = self.shape;
        Ok(Tensor::new(&[indices.len(), c, h, w], data)?)
    }

    /// Labels, or all-inlier labels when none are attached.
    pub fn labels_or_inliers(&self) -> Vec<bool> {
        self.labels.clone().unwrap_or_else(|| vec![false; self.len()])
    }

    /// Subset in the given order, keeping labels, masks and origins aligned.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Dataset {
            shape: self.shape,
            data,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            masks: self.masks.as_ref().map(|m| indices.iter().map(|&i| m[i].clone()).collect()),
            origins: indices.iter().map(|&i| self.origins[i]).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Concatenates datasets of equal shape. Labels and masks are kept only
    /// when every part has them.
    pub fn concat(parts: &[&Dataset], provenance: Provenance) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| AodError::Contract("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut origins = Vec::new();
        for p in parts {
            if p.shape != first.shape {
                return Err(AodError::Contract(format!("shape {:?} vs {:?}", p.shape, first.shape)));
            }
            data.extend_from_slice(&p.data);
            origins.extend_from_slice(&p.origins);
        }
        let labels = parts
            .iter()
            .map(|p| p.labels.clone())
            .collect::<Option<Vec<_>>>()
            .map(|v| v.concat());
        let masks = parts
            .iter()
            .map(|p| p.masks.clone())
            .collect::<Option<Vec<_>>>()
            .map(|v| v.concat());
        Ok(Dataset {
            shape: first.shape,
            data,
            labels,
            masks,
            origins,
            provenance,
        })
    }

    pub(crate) fn with_origins(mut self, source: Source) -> Self {
        for o in &mut self.origins {
            o.source = source;
        }
        self
    }
}
