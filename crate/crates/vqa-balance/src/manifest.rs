//! Content fingerprints and training run manifests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vqa_balance_core::data::DataStore;
use vqa_balance_core::model::ModelKind;
use vqa_balance_core::train::{ArchConfig, EpochStats, TrainConfig};

use crate::store::store_files;

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a value's compact JSON serialization. Struct fields serialize in
/// declaration order and maps are ordered, so the hash is stable.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("value serializes"))
}

/// SHA-256 of each record file the store would write, keyed by file name.
pub fn store_fingerprints(store: &DataStore) -> BTreeMap<String, String> {
    store_files(store)
        .into_iter()
        .map(|(name, bytes)| (name.to_string(), sha256_hex(&bytes)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl ToolInfo {
    pub fn current() -> Self {
        ToolInfo {
            name: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: ToolInfo,
    pub model: ModelKind,
    pub split: String,
    pub train_config: TrainConfig,
    pub arch: ArchConfig,
    pub config_hash: String,
    pub dataset_fingerprints: BTreeMap<String, String>,
    pub explain_tasks_used: usize,
    pub history: Vec<EpochStats>,
    pub checkpoint: CheckpointRef,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
