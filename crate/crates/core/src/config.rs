//! Run configuration: one JSON document covering data, children, controller
//! and search, validated before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::ControllerConfig;
use crate::data::{load_splits, make_indist, plant_outliers, synth_defects, synth_noise, Dataset, Family, NoiseKind, Provenance, SplitPlan, Splits};
use crate::error::{AodError, Result};
use crate::search::{derive_seed, SearchConfig};
use crate::zoo::ZooConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutlierSource {
    Blobs,
    Textures,
    Gaussian,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// In-distribution images with outliers from other generators planted
    /// into the labeled splits.
    Planted {
        inliers: Family,
        outliers: Vec<OutlierSource>,
        n: usize,
        n_out: usize,
        shape: [usize; 3],
        plan: SplitPlan,
    },
    /// Stripe textures; defective images are the outliers and carry masks.
    Defects { n: usize, shape: [usize; 3], plan: SplitPlan },
    /// Splits saved earlier as IDX files plus a manifest.
    Stored { dir: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Planted {
            inliers: Family::Blobs,
            outliers: vec![OutlierSource::Textures, OutlierSource::Gaussian],
            n: 500,
            n_out: 100,
            shape: [1, 16, 16],
            plan: SplitPlan::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(AodError::Config(what.to_string()));
        match self {
            DatasetSpec::Planted {
                outliers, n, n_out, shape, ..
            } => {
                if outliers.is_empty() || *n == 0 || *n_out == 0 || shape.contains(&0) {
                    return bad("planted datasets need outlier sources and positive sizes");
                }
            }
            DatasetSpec::Defects { n, shape, .. } => {
                if *n < 2 || shape.contains(&0) {
                    return bad("defect datasets need n >= 2 and a positive shape");
                }
            }
            DatasetSpec::Stored { .. } => {}
        }
        Ok(())
    }

    /// Generates or loads the train/valid/test splits.
    pub fn materialize(&self) -> Result<Splits> {
        match self {
            DatasetSpec::Planted {
                inliers,
                outliers,
                n,
                n_out,
                shape,
                plan,
            } => {
                let ins = make_indist(*inliers, *n, *shape, derive_seed(plan.seed, 11, 0))?;
                let k = outliers.len();
                let mut parts = Vec::with_capacity(k);
                for (i, src) in outliers.iter().enumerate() {
                    let count = n_out / k + usize::from(i < n_out % k);
                    if count == 0 {
                        continue;
                    }
                    let seed = derive_seed(plan.seed, 12, i as u64);
                    parts.push(match src {
                        OutlierSource::Blobs => make_indist(Family::Blobs, count, *shape, seed)?,
                        OutlierSource::Textures => make_indist(Family::Textures, count, *shape, seed)?,
                        OutlierSource::Gaussian => synth_noise(NoiseKind::Gaussian, count, *shape, seed)?,
                        OutlierSource::Uniform => synth_noise(NoiseKind::Uniform, count, *shape, seed)?,
                    });
                }
                let refs: Vec<&Dataset> = parts.iter().collect();
                let generator = parts.iter().map(|p| p.provenance.generator.clone()).collect::<Vec<_>>().join("+");
                let outs = Dataset::concat(
                    &refs,
                    Provenance {
                        generator,
                        seed: plan.seed,
                    },
                )?;
                plant_outliers(&ins, &outs, plan)
            }
            DatasetSpec::Defects { n, shape, plan } => {
                let all = synth_defects(*n, *shape, derive_seed(plan.seed, 13, 0))?;
                let labels = all.labels_or_inliers();
                let clean: Vec<usize> = (0..all.len()).filter(|&i| !labels[i]).collect();
                let defective: Vec<usize> = (0..all.len()).filter(|&i| labels[i]).collect();
                plant_outliers(&all.subset(&clean), &all.subset(&defective), plan)
            }
            DatasetSpec::Stored { dir } => load_splits(dir),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub search: SearchConfig,
    pub zoo: ZooConfig,
    pub controller: ControllerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/latest"),
            dataset: DatasetSpec::default(),
            search: SearchConfig::default(),
            zoo: ZooConfig::default(),
            controller: ControllerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| AodError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AodError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.search.validate()?;
        self.zoo.validate()?;
        self.controller.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_stated_constants() {
        let c = RunConfig::default();
        assert_eq!(c.controller.learning_rate, 3.5e-4);
        assert_eq!(c.controller.hidden, 50);
        assert_eq!(c.search.buffer_capacity, 10);
        assert_eq!(c.controller.temperature, 5.0);
        assert_eq!(c.controller.tanh_constant, 2.5);
        assert_eq!(c.zoo.batch_size, 64);
        assert_eq!(c.zoo.momentum, 0.9);
        assert_eq!(c.search.epochs, 500);
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        assert!(matches!(RunConfig::from_json(r#"{"sead": 1}"#), Err(AodError::Config(_))));
        let partial = RunConfig::from_json(r#"{"seed": 3, "search": {"epochs": 7}}"#).unwrap();
        assert_eq!((partial.seed, partial.search.epochs, partial.search.children_per_step), (3, 7, 5));
    }

    #[test]
    fn negative_exploration_is_rejected() {
        let r = RunConfig::from_json(r#"{"search": {"eta_explore": -0.1}}"#);
        assert!(matches!(r, Err(AodError::Config(_))));
    }

    #[test]
    fn defect_splits_keep_clean_training_data() {
        let spec = DatasetSpec::Defects {
            n: 60,
            shape: [1, 8, 8],
            plan: SplitPlan {
                contamination: 0.3,
                ..Default::default()
            },
        };
        let s = spec.materialize().unwrap();
        assert!(s.train.labels_or_inliers().iter().all(|l| !l));
        assert!(s.valid.labels_or_inliers().iter().any(|&l| l));
        assert!(s.test.masks.is_some());
    }
}
