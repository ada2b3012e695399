//! Run manifest: which stage wrote which file, under which config, and when.
//! The only output that carries wall-clock data.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::artifact::{to_json, write_text};
use crate::RunError;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub path: String,
    pub stage_key: String,
    pub config_hash: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        Self { tool_version: TOOL_VERSION.into(), config_hash: config_hash.into(), stages: Vec::new() }
    }

    /// Loads `dir/manifest.json` if present, otherwise starts an empty one.
    pub fn open(dir: &Path, config_hash: &str) -> Self {
        std::fs::read_to_string(dir.join(MANIFEST_FILE))
            .ok()
            .and_then(|s| serde_json::from_str::<RunManifest>(&s).ok())
            .map(|mut m| {
                m.config_hash = config_hash.into();
                m.tool_version = TOOL_VERSION.into();
                m
            })
            .unwrap_or_else(|| Self::new(config_hash))
    }

    /// Replaces any earlier record for the same path.
    pub fn record(&mut self, rec: StageRecord) {
        self.stages.retain(|r| r.path != rec.path);
        self.stages.push(rec);
    }

    pub fn save(&self, dir: &Path) -> Result<(), RunError> {
        write_text(&dir.join(MANIFEST_FILE), &to_json(self))
    }
}
