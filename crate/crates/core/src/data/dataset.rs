//! Dataset directories: one array container per magnetogram plus `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{format_timestamp, ingest, Magnetogram};
use crate::error::{Error, Result};
use crate::io::container::{self, Sidecar};
use crate::provenance::sha256_file;

pub const MANIFEST: &str = "manifest.json";
pub const DATASET_FORMAT_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub ids: Vec<String>,
    /// Resolved configuration that produced the dataset.
    pub config: serde_json::Value,
    /// File name → sha256 for every file written.
    pub files: BTreeMap<String, String>,
}

/// Writes every magnetogram (and its clean field, if any) into `dir`.
pub fn write_dataset(dir: &Path, maps: &[Magnetogram], config: serde_json::Value) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    let mut record = |name: String| -> Result<()> {
        let hash = sha256_file(&dir.join(&name))?;
        files.insert(name, hash);
        Ok(())
    };
    for m in maps {
        let sidecar = |id: &str, grid: &crate::grid::Grid| Sidecar {
            height: grid.height(),
            width: grid.width(),
            unit: "Gauss".into(),
            timestamp: m.timestamp.as_ref().map(format_timestamp),
            source: m.source.as_str().into(),
            id: Some(id.to_string()),
        };
        container::write(&dir.join(&m.id), &m.pixels, &sidecar(&m.id, &m.pixels))?;
        record(format!("{}.f32", m.id))?;
        record(format!("{}.json", m.id))?;
        if let Some(clean) = &m.clean {
            let id = format!("{}.clean", m.id);
            container::write(&dir.join(&id), clean, &sidecar(&id, clean))?;
            record(format!("{id}.f32"))?;
            record(format!("{id}.json"))?;
        }
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION.into(),
        ids: maps.iter().map(|m| m.id.clone()).collect(),
        config,
        files,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    let path = dir.join(MANIFEST);
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "dataset format version {:?}, expected {DATASET_FORMAT_VERSION:?}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Loads every magnetogram listed in the manifest, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Magnetogram>)> {
    let manifest = read_manifest(dir)?;
    let maps = manifest
        .ids
        .iter()
        .map(|id| ingest(dir.join(format!("{id}.json"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, maps))
}
