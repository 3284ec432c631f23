//! Retraining a chosen child and scoring it on a labeled split.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Splits};
use crate::error::{AodError, Result};
use crate::metrics::{aupr, auroc, pixel_auroc, rpro, PositiveClass};
use crate::space::ModelSpec;
use crate::zoo::{train_child_scheduled, ChildModel, ParamStore, ZooConfig};

/// Score quantiles averaged by the region-overlap metric.
pub const RPRO_THRESHOLDS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub samples: usize,
    pub outliers: usize,
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
    /// Present when the split carries defect masks with at least one region.
    pub rpro: Option<f64>,
    pub pixel_auroc: Option<f64>,
}

/// Image-level metrics on `data`, plus pixel-level ones when it has masks.
pub fn score_split(model: &ChildModel, store: &ParamStore, data: &Dataset, chunk: usize) -> Result<SplitScores> {
    let with_pixels = data.masks.as_ref().is_some_and(|m| m.iter().flatten().any(|&p| p));
    let s = model.score_dataset(store, data, chunk, with_pixels)?;
    let labels = data.labels_or_inliers();
    let (rpro_v, pix) = match (&s.pixels, &data.masks) {
        (Some(maps), Some(masks)) if with_pixels => {
            let [_, h, w] = data.shape();
            (Some(rpro(maps, masks, h, w, RPRO_THRESHOLDS)?), Some(pixel_auroc(maps, masks)?))
        }
        _ => (None, None),
    };
    Ok(SplitScores {
        samples: data.len(),
        outliers: labels.iter().filter(|&&l| l).count(),
        auroc: auroc(&s.scores, &labels)?,
        aupr_in: aupr(&s.scores, &labels, PositiveClass::In)?,
        aupr_out: aupr(&s.scores, &labels, PositiveClass::Out)?,
        rpro: rpro_v,
        pixel_auroc: pix,
    })
}

/// Trains `spec` on `store` for `steps`, dropping the learning rate at the
/// `lr_drops` fractions, and makes sure its hypothesis state is fitted. Divergence is an error here since there is no reward to zero.
pub fn train_final(
    spec: &ModelSpec,
    store: &mut ParamStore,
    splits: &Splits,
    steps: usize,
    zoo: &ZooConfig,
    lr_drops: &[f64],
    seed: u64,
) -> Result<ChildModel> {
    let mut model = ChildModel::build(spec, splits.train.shape(), store, zoo)?;
    let outcome = train_child_scheduled(&mut model, store, &splits.train, steps, zoo, lr_drops, seed)?;
    if let Some(f) = outcome.failure {
        return Err(AodError::Numeric(f));
    }
    if model.state.is_none() {
        let n = zoo.batch_size.min(splits.train.len());
        let first: Vec<usize> = (0..n).collect();
        model.init_state(store, &splits.train.batch(&first)?, zoo)?;
    }
    Ok(model)
}
