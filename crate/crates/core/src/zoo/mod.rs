//! Child autoencoders built from [`ModelSpec`](crate::space::ModelSpec)s on
//! a shared parameter store, with their distances, regularizers and training.

mod checkpoint;
mod distance;
mod hypothesis;
mod model;
mod store;
mod train;

use aod_substrate::OptimizerKind;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_child, save_child, ChildHeader, CHILD_SPEC_FILE, CHILD_TENSOR_FILE};
pub use distance::{distance, distance_grad, DistanceOp, SSIM_C1, SSIM_C2, SSIM_WINDOW};
pub use hypothesis::{cluster_kl, cluster_kl_grad, HypothesisConfig, HypothesisState, Mixture, RegularizerOp};
pub use model::{conv_macs, layer_keys, ChildModel, ScoreMap};
pub use store::{Init, ParamStore};
pub use train::{evaluate_child, train_child, train_child_scheduled, ChildReport, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChildOptimizer {
    Adam,
    SgdMomentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZooConfig {
    /// Weight of the regularizer in `score = dist + lambda_reg * reg`.
    pub lambda_reg: f64,
    pub mixture_components: usize,
    pub cluster_centroids: usize,
    pub sigma_min: f64,
    pub radius_quantile: f64,
    pub kmeans_iters: usize,
    pub batch_size: usize,
    pub optimizer: ChildOptimizer,
    pub momentum: f64,
    pub learning_rate: f64,
    pub divergence_threshold: f64,
    /// Samples per forward pass when scoring a split.
    pub eval_chunk: usize,
}

impl Default for ZooConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 0.1,
            mixture_components: 4,
            cluster_centroids: 4,
            sigma_min: 1e-3,
            radius_quantile: 0.9,
            kmeans_iters: 5,
            batch_size: 64,
            optimizer: ChildOptimizer::Adam,
            momentum: 0.9,
            learning_rate: 0.01,
            divergence_threshold: 1e6,
            eval_chunk: 64,
        }
    }
}

impl ZooConfig {
    pub fn hypothesis(&self) -> HypothesisConfig {
        HypothesisConfig {
            mixture_components: self.mixture_components,
            cluster_centroids: self.cluster_centroids,
            sigma_min: self.sigma_min,
            radius_quantile: self.radius_quantile,
            kmeans_iters: self.kmeans_iters,
        }
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            ChildOptimizer::Adam => OptimizerKind::Adam {
                beta1: self.momentum,
                beta2: 0.999,
                eps: 1e-8,
            },
            ChildOptimizer::SgdMomentum => OptimizerKind::SgdMomentum { momentum: self.momentum },
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |what: &str| Err(crate::AodError::Config(what.to_string()));
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return bad("lambda_reg must be a finite non-negative number");
        }
        if self.mixture_components == 0 || self.cluster_centroids == 0 {
            return bad("mixture_components and cluster_centroids must be positive");
        }
        if self.batch_size < self.mixture_components.max(self.cluster_centroids) {
            return bad("batch_size must be at least the number of mixture components and centroids");
        }
        if !(self.sigma_min > 0.0) || !(0.0..=1.0).contains(&self.radius_quantile) {
            return bad("sigma_min must be positive and radius_quantile in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.learning_rate > 0.0) {
            return bad("momentum must be in [0, 1) and learning_rate positive");
        }
        if self.eval_chunk == 0 || !(self.divergence_threshold > 0.0) {
            return bad("eval_chunk and divergence_threshold must be positive");
        }
        Ok(())
    }
}
