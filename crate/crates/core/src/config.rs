//! Pipeline configuration with a canonical JSON form and content hashes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneHyper;
use crate::direction::DirectionConfig;
use crate::error::{arg_err, Error, Result};
use crate::eval::{BOUNDARY_TOL, DEFAULT_THRESHOLDS};
use crate::heads::{HeadConfig, TrainHyper};
use crate::synth::SynthConfig;

/// Where logits bundles come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Synthesized from ground truth; only the heads are trained.
    Oracle,
    /// Produced by the tiny backbone, trained jointly with the heads.
    Backbone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub boundary_tol: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            boundary_tol: BOUNDARY_TOL,
        }
    }
}

/// Scene ranges used by `ablate`, which generates its own train and test scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Index of the first test scene; train scenes start at 0.
    pub test_offset: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            train_scenes: 40,
            test_scenes: 20,
            test_offset: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Seeds scene generation, training and oracle noise.
    pub seed: u64,
    pub synth: SynthConfig,
    pub direction: DirectionConfig,
    pub head: HeadConfig,
    /// Head training on oracle bundles.
    pub train: TrainHyper,
    /// Joint backbone and head training.
    pub backbone: BackboneHyper,
    pub noise_sigma: f64,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Oracle,
            seed: 0,
            synth: SynthConfig::default(),
            direction: DirectionConfig::default(),
            head: HeadConfig::default(),
            train: TrainHyper::default(),
            backbone: BackboneHyper::default(),
            noise_sigma: 0.0,
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

fn canonical(value: &impl Serialize) -> Result<String> {
    // serde_json's default map type is ordered, so re-serializing a Value sorts keys
    Ok(serde_json::to_string(&serde_json::to_value(value)?)?)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct ModelKey<'a> {
    mode: Mode,
    num_classes: usize,
    direction: &'a DirectionConfig,
    head: &'a HeadConfig,
    /// Backbone mode only.
    logit_stride: Option<usize>,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Compact JSON with object keys sorted at every level.
    pub fn to_canonical_json(&self) -> Result<String> {
        canonical(self)
    }

    pub fn to_pretty_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::to_value(self)?)?)
    }

    /// Hash of everything that fixes the geometry and shapes of trained parameters: mode,
    /// class count, direction config and head config. Saved parameters record it and are
    /// refused under a config with a different hash.
    pub fn model_hash(&self) -> Result<String> {
        let key = ModelKey {
            mode: self.mode,
            num_classes: self.synth.num_classes,
            direction: &self.direction,
            head: &self.head,
            logit_stride: (self.mode == Mode::Backbone).then_some(self.backbone.logit_stride),
        };
        Ok(sha256_hex(canonical(&key)?.as_bytes()))
    }

    /// Hash of the whole canonical config.
    pub fn config_hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_canonical_json()?.as_bytes()))
    }

    /// Sets every seed the pipeline uses.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
        self.backbone.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.direction.validate()?;
        self.head.validate()?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return arg_err(format!("noise_sigma {} must be finite and non-negative", self.noise_sigma));
        }
        if self.eval.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return arg_err("IoU thresholds must lie in [0, 1]");
        }
        for (what, lr) in [("train", self.train.lr), ("backbone", self.backbone.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidArgument(format!("{} learning rate {} must be positive", what, lr)));
            }
        }
        if !(0.0..=1.0).contains(&self.backbone.decay_at) {
            return arg_err("backbone decay_at must lie in [0, 1]");
        }
        if self.backbone.logit_stride == 0 {
            return arg_err("backbone logit stride must be positive");
        }
        if self.mode == Mode::Backbone && self.head.refine_sources.iter().any(|&s| s > 1) {
            return arg_err("the backbone exposes hypercolumn sources 0 and 1 only");
        }
        if self.mode == Mode::Oracle && self.head.refine_sources.iter().any(|&s| s > 1) {
            return arg_err("oracle bundles expose hypercolumn sources 0 and 1 only");
        }
        Ok(())
    }
}

pub(crate) fn content_hash<'a>(entries: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> String {
    let mut h = Sha256::new();
    for (name, bytes) in entries {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    hex::encode(h.finalize())
}
