//! Experiment configuration: one versioned JSON document, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sgsp_core::evaluation::{FilterMode, MaxAggregation};
use sgsp_core::filtering::{RegistryMode, RegistrySource, DEFAULT_MAX_ATTEMPTS, DEFAULT_THRESHOLD};
use sgsp_core::generator::{Activation, PretrainConfig};
use sgsp_core::numerics::derive_seed;
use sgsp_core::poisoning::{Method, PoisonConfig};
use sgsp_core::world::WorldParams;

use crate::RunError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorBlock {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for GeneratorBlock {
    fn default() -> Self {
        Self { hidden: vec![64, 64], activation: Activation::Tanh }
    }
}

/// Poisoning hyperparameters; the seed comes from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoisonBlock {
    pub method: Method,
    pub use_triplet: bool,
    pub p_forget: f64,
    pub triplet_margin: f64,
    pub triplet_weight: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for PoisonBlock {
    fn default() -> Self {
        let d = PoisonConfig::default();
        Self {
            method: d.method,
            use_triplet: d.use_triplet,
            p_forget: d.p_forget,
            triplet_margin: d.triplet_margin,
            triplet_weight: d.triplet_weight,
            steps: d.steps,
            lr: d.lr,
            batch: d.batch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterBlock {
    pub mode: FilterMode,
    pub threshold: f64,
    pub max_attempts: usize,
    pub registry_source: RegistrySource,
    pub registry_mode: RegistryMode,
}

impl Default for FilterBlock {
    fn default() -> Self {
        Self {
            mode: FilterMode::None,
            threshold: DEFAULT_THRESHOLD,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            registry_source: RegistrySource::ForgetTrain,
            registry_mode: RegistryMode::Utterance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBlock {
    pub bins: usize,
    pub max_aggregation: MaxAggregation,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self { bins: 40, max_aggregation: MaxAggregation::MeanOfMax }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReproduceBlock {
    /// Forget-set sizes swept by `reproduce`.
    pub settings: Vec<usize>,
}

impl Default for ReproduceBlock {
    fn default() -> Self {
        Self { settings: vec![1, 15, 100] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_forget")]
    pub n_forget: usize,
    #[serde(default)]
    pub world: WorldParams,
    #[serde(default)]
    pub generator: GeneratorBlock,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub poison: PoisonBlock,
    #[serde(default)]
    pub filter: FilterBlock,
    #[serde(default)]
    pub eval: EvalBlock,
    #[serde(default)]
    pub reproduce: ReproduceBlock,
}

fn default_n_forget() -> usize {
    1
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            n_forget: default_n_forget(),
            world: WorldParams::default(),
            generator: GeneratorBlock::default(),
            pretrain: PretrainConfig::default(),
            poison: PoisonBlock::default(),
            filter: FilterBlock::default(),
            eval: EvalBlock::default(),
            reproduce: ReproduceBlock::default(),
        }
    }
}

/// Named stage streams. Each stage seed is `derive_seed(master, name)`:
/// FNV-1a 64 over the master seed's little-endian bytes followed by the UTF-8
/// name, passed through the SplitMix64 finalizer.
pub mod stage {
    pub const WORLD: &str = "world";
    pub const PARTITION: &str = "partition";
    pub const EVAL_PAIRS: &str = "eval-pairs";
    pub const INIT: &str = "init";
    pub const PRETRAIN: &str = "pretrain";
    pub const POISON: &str = "poison";
    pub const FILTER: &str = "filter";
    pub const GRADCHECK: &str = "gradcheck";
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, RunError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn stage_seed(&self, name: &str) -> u64 {
        derive_seed(self.seed, name)
    }

    pub fn poison_config(&self) -> PoisonConfig {
        let p = self.poison;
        PoisonConfig {
            method: p.method,
            use_triplet: p.use_triplet,
            p_forget: p.p_forget,
            triplet_margin: p.triplet_margin,
            triplet_weight: p.triplet_weight,
            steps: p.steps,
            lr: p.lr,
            batch: p.batch,
            seed: self.stage_seed(stage::POISON),
        }
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let d_in = self.world.d_id + self.world.d_content;
        let mut dims = vec![d_in];
        dims.extend(&self.generator.hidden);
        dims.push(d_in);
        dims
    }

    /// Checks every downstream precondition before any compute.
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |msg: String| Err(RunError::Config(msg));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        self.world.validate().map_err(|e| RunError::Config(format!("world: {e}")))?;
        let n = self.world.n_speakers;
        for &k in std::iter::once(&self.n_forget).chain(&self.reproduce.settings) {
            if k == 0 || k >= n {
                return bad(format!("n_forget {k} must be in [1, {n})"));
            }
        }
        if self.reproduce.settings.is_empty() {
            return bad("reproduce.settings must not be empty".into());
        }
        if self.generator.hidden.contains(&0) {
            return bad("generator.hidden widths must be positive".into());
        }
        let pt = &self.pretrain;
        if pt.steps == 0 || pt.batch == 0 || !(pt.lr > 0.0 && pt.lr.is_finite()) {
            return bad("pretrain steps, batch and lr must be positive".into());
        }
        self.poison_config().validate().map_err(|e| RunError::Config(format!("poison: {e}")))?;
        let f = &self.filter;
        if !(f.threshold > 0.0 && f.threshold <= 1.0) {
            return bad(format!("filter.threshold {} must be in (0, 1]", f.threshold));
        }
        if f.max_attempts == 0 {
            return bad("filter.max_attempts must be positive".into());
        }
        if self.eval.bins < 2 {
            return bad("eval.bins must be at least 2".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        digest(&[serde_json::to_string(self).expect("config serializes").as_bytes()])
    }

    /// Key of the world artifact: world parameters, partition size, master seed.
    pub fn world_key(&self) -> String {
        keyed("world", &(&self.world, self.n_forget, self.seed))
    }

    /// Pretraining does not see the forget/retain split, so its key leaves
    /// `n_forget` out and one pretrained model serves every setting.
    pub fn pretrain_key(&self) -> String {
        keyed("pretrain", &(&self.world, self.seed, &self.generator, &self.pretrain))
    }

    pub fn poison_key(&self) -> String {
        keyed("poison", &(self.world_key(), self.pretrain_key(), &self.poison))
    }
}

fn keyed<T: Serialize>(stage: &str, value: &T) -> String {
    digest(&[stage.as_bytes(), b"\0", serde_json::to_string(value).expect("key serializes").as_bytes()])
}

fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
