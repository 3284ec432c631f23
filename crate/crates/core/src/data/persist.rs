//! Datasets on disk: IDX payloads plus a JSON manifest.
//!
//! Image values are stored as bytes, so a save/load cycle quantizes them to
//! multiples of 1/255.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::idx::{load_idx, parse_idx_raw, write_idx};
use super::{Dataset, Origin, Provenance, Splits};
use crate::error::{AodError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub provenance: Provenance,
    pub shape: [usize; 3],
    pub count: usize,
    pub images: String,
    pub labels: Option<Vec<u8>>,
    pub masks: Option<String>,
    pub membership: Vec<Origin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: DatasetManifest,
    pub valid: DatasetManifest,
    pub test: DatasetManifest,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn save_one(dir: &Path, name: &str, ds: &Dataset) -> Result<DatasetManifest> {
    let [c, h, w] = ds.shape();
    let images = format!("{name}-images.idx");
    write_idx(&dir.join(&images), &[ds.len(), c, h, w], ds.values())?;
    let masks = match &ds.masks {
        Some(m) => {
            let file = format!("{name}-masks.idx");
            let flat: Vec<f64> = m.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            write_idx(&dir.join(&file), &[ds.len(), h, w], &flat)?;
            Some(file)
        }
        None => None,
    };
    Ok(DatasetManifest {
        provenance: ds.provenance.clone(),
        shape: ds.shape(),
        count: ds.len(),
        images,
        labels: ds.labels.as_ref().map(|l| l.iter().map(|&b| b as u8).collect()),
        masks,
        membership: ds.origins.clone(),
    })
}

fn load_one(dir: &Path, m: &DatasetManifest) -> Result<Dataset> {
    let images = load_idx(&dir.join(&m.images))?;
    let [c, h, w] = m.shape;
    if images.shape() != [m.count, c, h, w] {
        return Err(AodError::Contract(format!(
            "{} has shape {:?}, manifest says {} x {:?}",
            m.images,
            images.shape(),
            m.count,
            m.shape
        )));
    }
    let mut ds = Dataset::new(m.shape, images.into_data(), m.provenance.clone())?;
    ds.labels = m.labels.as_ref().map(|l| l.iter().map(|&b| b != 0).collect());
    if let Some(file) = &m.masks {
        let (_, raw) = parse_idx_raw(&fs::read(dir.join(file))?)?;
        ds.masks = Some(raw.chunks(h * w).map(|r| r.iter().map(|&b| b != 0).collect()).collect());
    }
    ds.origins = m.membership.clone();
    Ok(ds)
}

/// Writes all three splits into `dir` and returns the manifest path.
pub fn save_splits(dir: &Path, splits: &Splits) -> Result<std::path::PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = SplitManifest {
        train: save_one(dir, "train", &splits.train)?,
        valid: save_one(dir, "valid", &splits.valid)?,
        test: save_one(dir, "test", &splits.test)?,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn load_splits(dir: &Path) -> Result<Splits> {
    let manifest: SplitManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    Ok(Splits {
        train: load_one(dir, &manifest.train)?,
        valid: load_one(dir, &manifest.valid)?,
        test: load_one(dir, &manifest.test)?,
    })
}
