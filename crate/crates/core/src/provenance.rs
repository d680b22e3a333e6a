//! Content hashes that tie every artifact to its inputs.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of a dataset directory: the hash of its manifest, which itself
/// lists the hash of every member file.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    sha256_file(&dir.join(crate::data::dataset::MANIFEST))
}
