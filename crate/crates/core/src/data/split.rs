//! Train/valid/test splitting with injected outliers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Provenance, Source};
use crate::error::{AodError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitPlan {
    /// train : valid : test
    pub ratios: [f64; 3],
    /// Fraction of each labeled split that is replaced by outliers.
    pub contamination: f64,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            ratios: [0.6, 0.2, 0.2],
            contamination: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl SplitPlan {
    /// Split sizes for `n` samples.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let total: f64 = self.ratios.iter().sum();
        let train = (n as f64 * self.ratios[0] / total).round() as usize;
        let valid = ((n as f64 * self.ratios[1] / total).round() as usize).min(n - train);
        [train, valid, n - train - valid]
    }

    /// Outliers planted into a labeled split of `n` samples.
    pub fn outliers_for(&self, n: usize) -> usize {
        (self.contamination * n as f64).floor() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(*r >= 0.0)) || self.ratios.iter().sum::<f64>() <= 0.0 {
            return Err(AodError::Contract(format!("invalid split ratios {:?}", self.ratios)));
        }
        if !(0.0..1.0).contains(&self.contamination) {
            return Err(AodError::Contract(format!("contamination {} outside [0, 1)", self.contamination)));
        }
        Ok(())
    }
}

/// Splits `in_data` by the plan and replaces `floor(contamination * size)`
/// samples of the valid and test splits with samples drawn from `out_data`.
///
/// Split sizes follow the ratios over `in_data.len()`; the in-samples displaced
/// by outliers are left out. Sample values are copied bit-exactly; only
/// membership and labels are assigned here.
pub fn plant_outliers(in_data: &Dataset, out_data: &Dataset, plan: &SplitPlan) -> Result<Splits> {
    plan.validate()?;
    if in_data.shape() != out_data.shape() {
        return Err(AodError::Contract(format!(
            "in-data shape {:?} differs from out-data shape {:?}",
            in_data.shape(),
            out_data.shape()
        )));
    }
    let [n_train, n_valid, n_test] = plan.sizes(in_data.len());
    let (k_valid, k_test) = (plan.outliers_for(n_valid), plan.outliers_for(n_test));
    if out_data.len() < k_valid + k_test {
        return Err(AodError::Contract(format!(
            "need {} out-of-distribution samples ({k_valid} valid + {k_test} test), have {}",
            k_valid + k_test,
            out_data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut ins: Vec<usize> = (0..in_data.len()).collect();
    ins.shuffle(&mut rng);
    let mut outs: Vec<usize> = (0..out_data.len()).collect();
    outs.shuffle(&mut rng);

    let inliers = in_data.clone().with_origins(Source::In);
    let outliers = out_data.clone().with_origins(Source::Out);
    let provenance = |name: &str| Provenance {
        generator: format!("{}+{}:{name}", in_data.provenance.generator, out_data.provenance.generator),
        seed: plan.seed,
    };

    let mut train = inliers.subset(&ins[..n_train]);
    train.labels = Some(vec![false; n_train]);
    train.provenance = provenance("train");

    let mut cursor = n_train;
    let mut out_cursor = 0;
    let mut labeled = |size: usize, k: usize, name: &str, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let mut part_in = inliers.subset(&ins[cursor..cursor + size - k]);
        part_in.labels = Some(vec![false; size - k]);
        let mut part_out = outliers.subset(&outs[out_cursor..out_cursor + k]);
        part_out.labels = Some(vec![true; k]);
        cursor += size - k;
        out_cursor += k;
        let joined = Dataset::concat(&[&part_in, &part_out], provenance(name))?;
        let mut order: Vec<usize> = (0..joined.len()).collect();
        order.shuffle(rng);
        Ok(joined.subset(&order))
    };
    let valid = labeled(n_valid, k_valid, "valid", &mut rng)?;
    let test = labeled(n_test, k_test, "test", &mut rng)?;
    Ok(Splits { train, valid, test })
}
