//! Binary weight snapshots.
//!
//! File layout: the 8-byte magic `MAGSRSNP`, a little-endian `u32` header
//! length, a JSON header, then every parameter as a little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, TrainingMetadata};
use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"MAGSRSNP";
pub const SNAPSHOT_FORMAT_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub format_version: String,
    pub config: ModelConfig,
    pub training_metadata: TrainingMetadata,
    pub param_count: usize,
    pub payload_sha256: String,
    /// Resolved run configuration and input hashes, when written by a run.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub provenance: serde_json::Value,
}

pub fn to_bytes(model: &Model) -> (SnapshotHeader, Vec<u8>) {
    to_bytes_with(model, serde_json::Value::Null)
}

pub fn to_bytes_with(model: &Model, provenance: serde_json::Value) -> (SnapshotHeader, Vec<u8>) {
    let payload: Vec<u8> = model.params().iter().flat_map(|v| v.to_le_bytes()).collect();
    let header = SnapshotHeader {
        format_version: SNAPSHOT_FORMAT_VERSION.into(),
        config: model.config().clone(),
        training_metadata: model.metadata.clone(),
        param_count: model.params().len(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        provenance,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    (header, out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    read_bytes(bytes).map(|(_, model)| model)
}

/// Parses a snapshot, returning its header alongside the model.
pub fn read_bytes(bytes: &[u8]) -> Result<(SnapshotHeader, Model)> {
    if bytes.len() < 12 || &bytes[..8] != SNAPSHOT_MAGIC {
        return Err(Error::Corrupt("not a weight snapshot (bad magic)".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < len {
        return Err(Error::Corrupt("truncated snapshot header".into()));
    }
    let value: serde_json::Value = serde_json::from_slice(&body[..len])
        .map_err(|e| Error::Corrupt(format!("unreadable snapshot header: {e}")))?;
    let version = value.get("format_version").and_then(|v| v.as_str());
    if version != Some(SNAPSHOT_FORMAT_VERSION) {
        return Err(Error::Schema(format!(
            "snapshot format version {version:?}, expected {SNAPSHOT_FORMAT_VERSION:?}"
        )));
    }
    let header: SnapshotHeader = serde_json::from_value(value)?;
    let payload = &body[len..];
    if payload.len() != header.param_count * 8 {
        return Err(Error::Corrupt(format!(
            "snapshot payload has {} bytes, expected {}",
            payload.len(),
            header.param_count * 8
        )));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(Error::Corrupt("snapshot payload checksum mismatch".into()));
    }
    let params = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let model = Model::from_parts(header.config.clone(), params, header.training_metadata.clone())?;
    Ok((header, model))
}

pub fn save_snapshot(model: &Model, path: impl AsRef<Path>) -> Result<SnapshotHeader> {
    save_snapshot_with(model, path, serde_json::Value::Null)
}

pub fn save_snapshot_with(
    model: &Model,
    path: impl AsRef<Path>,
    provenance: serde_json::Value,
) -> Result<SnapshotHeader> {
    let path = path.as_ref();
    let (header, bytes) = to_bytes_with(model, provenance);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(header)
}

pub fn load_snapshot(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, random_input, Heads};

    fn model() -> Model {
        let cfg = ModelConfig {
            base_channels: 3,
            depth: 2,
            dropout_p: 0.3,
            heads: Heads::MeanAndLogvar,
            variance_floor: 12.5,
            ..Default::default()
        };
        build_model(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.snap");
        let m = model();
        save_snapshot(&m, &path).unwrap();
        let back = load_snapshot(&path).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config().dropout_p, 0.3);
        let x = random_input(4, 4, 100.0, 0);
        assert_eq!(back.forward(&x, false, 0).unwrap(), m.forward(&x, false, 0).unwrap());
    }

    #[test]
    fn wrong_version_is_schema_error() {
        let (_, bytes) = to_bytes(&model());
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        header["format_version"] = "999".into();
        let json = serde_json::to_vec(&header).unwrap();
        let mut forged = Vec::new();
        forged.extend_from_slice(SNAPSHOT_MAGIC);
        forged.extend_from_slice(&(json.len() as u32).to_le_bytes());
        forged.extend_from_slice(&json);
        forged.extend_from_slice(&bytes[12 + len..]);
        assert!(matches!(from_bytes(&forged), Err(Error::Schema(_))));
    }

    #[test]
    fn corrupt_blobs_are_io_errors() {
        let (_, bytes) = to_bytes(&model());
        let truncated = &bytes[..bytes.len() - 5];
        assert!(from_bytes(truncated).unwrap_err().is_io());
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        assert!(from_bytes(&flipped).unwrap_err().is_io());
        assert!(from_bytes(b"garbage").unwrap_err().is_io());
        let missing = load_snapshot("/nonexistent/model.snap").unwrap_err();
        assert!(missing.is_io());
    }
}
