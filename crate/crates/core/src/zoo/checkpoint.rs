//! A trained child on disk: `spec.json` plus its parameters and hypothesis
//! state in one tensor file.

use std::fs;
use std::path::Path;

use aod_substrate::checkpoint;
use serde::{Deserialize, Serialize};

use super::hypothesis::HypothesisState;
use super::model::ChildModel;
use super::store::ParamStore;
use super::ZooConfig;
use crate::error::{AodError, Result};
use crate::space::ModelSpec;

pub const CHILD_SPEC_FILE: &str = "spec.json";
pub const CHILD_TENSOR_FILE: &str = "child.ckpt";
const PARAM_PREFIX: &str = "param/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildHeader {
    pub spec: ModelSpec,
    pub input_shape: [usize; 3],
}

/// Writes the model's parameters (from `store`) and state into `dir`.
pub fn save_child(dir: &Path, model: &ChildModel, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = ChildHeader {
        spec: model.spec.clone(),
        input_shape: model.input_shape,
    };
    fs::write(dir.join(CHILD_SPEC_FILE), serde_json::to_string_pretty(&header)?)?;
    let mut entries = Vec::new();
    for key in model.param_keys() {
        let t = store
            .get(key)
            .ok_or_else(|| AodError::Contract(format!("store lacks `{key}`")))?;
        entries.push((format!("{PARAM_PREFIX}{key}"), t.clone()));
    }
    if let Some(state) = &model.state {
        entries.extend(state.to_tensors());
    }
    checkpoint::save(&dir.join(CHILD_TENSOR_FILE), &entries)?;
    Ok(())
}

/// Rebuilds a saved child on a fresh store holding only its parameters.
pub fn load_child(dir: &Path, cfg: &ZooConfig) -> Result<(ChildModel, ParamStore)> {
    let header: ChildHeader = serde_json::from_str(&fs::read_to_string(dir.join(CHILD_SPEC_FILE))?)?;
    let entries = checkpoint::load(&dir.join(CHILD_TENSOR_FILE))?;
    let mut store = ParamStore::new(cfg.optimizer_kind(), cfg.learning_rate, 0)?;
    let mut model = ChildModel::build(&header.spec, header.input_shape, &mut store, cfg)?;
    let mut loaded = 0;
    for (name, t) in &entries {
        if let Some(key) = name.strip_prefix(PARAM_PREFIX) {
            store.replace(key, t.clone())?;
            loaded += 1;
        }
    }
    if loaded != model.param_keys().len() {
        return Err(AodError::Contract(format!(
            "checkpoint has {loaded} parameters, the spec needs {}",
            model.param_keys().len()
        )));
    }
    if entries.iter().any(|(n, _)| n.starts_with("hyp/")) || header.spec.hypothesis == crate::space::Hypothesis::Reconstruction {
        model.state = Some(HypothesisState::from_tensors(header.spec.hypothesis, &entries)?);
    }
    Ok((model, store))
}
