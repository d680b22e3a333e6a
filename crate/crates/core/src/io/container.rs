//! Array container: raw little-endian `f32` pixels (`<stem>.f32`) next to
//! a JSON sidecar (`<stem>.json`) holding the shape and metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const RAW_EXT: &str = "f32";
pub const SIDECAR_EXT: &str = "json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub height: usize,
    pub width: usize,
    pub unit: String,
    pub timestamp: Option<String>,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

/// `<stem>.f32` and `<stem>.json` for a stem path (any extension on
/// `path` other than the two container ones is kept as part of the stem).
pub fn paths_for(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some(RAW_EXT) | Some(SIDECAR_EXT) => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with(RAW_EXT), with(SIDECAR_EXT))
}

pub fn write(stem: &Path, grid: &Grid, sidecar: &Sidecar) -> Result<()> {
    let (raw_path, side_path) = paths_for(stem);
    let raw: Vec<u8> = grid
        .as_slice()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(&raw_path, raw).map_err(|e| Error::io(&raw_path, e))?;
    let mut json = serde_json::to_vec_pretty(sidecar)?;
    json.push(b'\n');
    fs::write(&side_path, json).map_err(|e| Error::io(&side_path, e))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(Sidecar, Grid)> {
    let (raw_path, side_path) = paths_for(path);
    let side_bytes = fs::read(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let sidecar: Sidecar = serde_json::from_slice(&side_bytes)
        .map_err(|e| Error::Schema(format!("{}: {e}", side_path.display())))?;
    let raw = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = sidecar.height * sidecar.width * 4;
    if raw.len() != expected {
        return Err(Error::Corrupt(format!(
            "{}: {} bytes, expected {expected}",
            raw_path.display(),
            raw.len()
        )));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let grid = Grid::from_vec(sidecar.height, sidecar.width, data)?;
    Ok((sidecar, grid))
}
