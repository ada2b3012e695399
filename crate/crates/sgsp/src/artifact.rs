//! JSON artifacts. Every file carries a format tag, a format version, the key
//! of the stage that produced it and the hash of the full config.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sgsp_core::evaluation::EvalReport;
use sgsp_core::generator::GeneratorModel;
use sgsp_core::poisoning::Method;
use sgsp_core::world::{Partition, SpeakerWorld};

use crate::RunError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope<T> {
    pub format: String,
    pub version: u32,
    pub stage_key: String,
    pub config_hash: String,
    pub body: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldArtifact {
    pub world: SpeakerWorld,
    pub partition: Partition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Pretrained,
    Poisoned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub init: u64,
    pub pretrain: u64,
    pub poison: Option<u64>,
}

/// How a poisoned model was produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoisonProvenance {
    pub method: Method,
    pub use_triplet: bool,
    pub p_forget: f64,
    pub triplet_margin: f64,
    pub triplet_weight: f64,
    pub steps: usize,
    pub lr: f64,
    pub n_forget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub kind: ModelKind,
    pub seeds: Seeds,
    pub poison: Option<PoisonProvenance>,
    /// Training loss per step.
    pub losses: Vec<f64>,
    pub model: GeneratorModel,
}

pub const WORLD_FORMAT: &str = "sgsp-world";
pub const MODEL_FORMAT: &str = "sgsp-model";
pub const REPORT_FORMAT: &str = "sgsp-report";

pub type WorldFile = Envelope<WorldArtifact>;
pub type ModelFile = Envelope<ModelArtifact>;
pub type ReportFile = Envelope<EvalReport>;

impl<T> Envelope<T> {
    pub fn new(format: &str, stage_key: String, config_hash: String, body: T) -> Self {
        Self { format: format.into(), version: FORMAT_VERSION, stage_key, config_hash, body }
    }

    /// Refuses artifacts produced under a different configuration.
    pub fn expect_key(&self, expected: &str, path: &Path) -> Result<(), RunError> {
        if self.stage_key != expected {
            return Err(RunError::Stale {
                path: path.display().to_string(),
                found: self.stage_key.clone(),
                expected: expected.into(),
            });
        }
        Ok(())
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    write_text(path, &to_json(value))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| RunError::io(path, e))
}

pub fn read_envelope<T: DeserializeOwned>(path: &Path, format: &str) -> Result<Envelope<T>, RunError> {
    let text = fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    let env: Envelope<T> =
        serde_json::from_str(&text).map_err(|e| RunError::Artifact(format!("{}: {e}", path.display())))?;
    if env.format != format {
        return Err(RunError::Artifact(format!("{}: expected a {format} file, found {}", path.display(), env.format)));
    }
    if env.version != FORMAT_VERSION {
        return Err(RunError::Artifact(format!(
            "{}: format version {} is not supported (expected {FORMAT_VERSION})",
            path.display(),
            env.version
        )));
    }
    Ok(env)
}
