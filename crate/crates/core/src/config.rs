//! Experiment configuration read from TOML.
//!
//! ```toml
//! seed = 0
//!
//! [model]
//! layers = 4
//! dim = 32
//!
//! [router]
//! kind = "ld-shared"   # ld-shared | ld-local | topk | relu
//! top_k = 2            # only read for kind = "topk"
//!
//! [loss]
//! alpha = 0.01
//! beta = 0.1
//! k_target = 2
//! ```
//!
//! Every section except `[router]` may be omitted; omitted keys take the
//! defaults below. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::routers::RouterKind;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "LDMOLE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub dim: usize,
    pub vocab: usize,
    pub num_classes: usize,
    pub num_experts: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub dropout: f64,
    pub lambda_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            layers: m.layers,
            dim: m.dim,
            vocab: m.vocab,
            num_classes: m.num_classes,
            num_experts: m.num_experts,
            lora_rank: m.lora_rank,
            lora_alpha: m.lora_alpha,
            dropout: m.dropout,
            lambda_hidden: m.lambda_hidden,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouterName {
    LdShared,
    LdLocal,
    Topk,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterSection {
    pub kind: RouterName,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_top_k() -> usize {
    2
}

impl RouterSection {
    pub fn kind(&self) -> RouterKind {
        match self.kind {
            RouterName::LdShared => RouterKind::LdShared,
            RouterName::LdLocal => RouterKind::LdLocal,
            RouterName::Topk => RouterKind::TopK(self.top_k),
            RouterName::Relu => RouterKind::Relu,
        }
    }

    pub fn from_kind(kind: RouterKind) -> Self {
        let (kind, top_k) = match kind {
            RouterKind::LdShared => (RouterName::LdShared, 2),
            RouterKind::LdLocal => (RouterName::LdLocal, 2),
            RouterKind::TopK(k) => (RouterName::Topk, k),
            RouterKind::Relu => (RouterName::Relu, 2),
        };
        Self { kind, top_k }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub k_target: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.1,
            k_target: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Optimizer steps between train metric events.
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            lr_milestones: vec![6, 8],
            lr_decay: 0.1,
            weight_decay: 0.01,
            grad_clip: 1.0,
            log_every: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Directory for the checkpoint and metrics; `None` keeps results in memory.
    pub dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    pub router: RouterSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputSection,
}

impl TrainConfig {
    /// Defaults with the given router.
    pub fn with_router(kind: RouterKind) -> Self {
        Self {
            seed: 0,
            model: ModelSection::default(),
            router: RouterSection::from_kind(kind),
            loss: LossSection::default(),
            train: TrainSection::default(),
            data: DataConfig::default(),
            output: OutputSection::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, applies the seed override from the environment, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}: expected an unsigned integer, got {s:?}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            layers: m.layers,
            dim: m.dim,
            vocab: m.vocab,
            num_classes: m.num_classes,
            num_experts: m.num_experts,
            lora_rank: m.lora_rank,
            lora_alpha: m.lora_alpha,
            dropout: m.dropout,
            lambda_hidden: m.lambda_hidden,
            router: self.router.kind(),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.loss.alpha,
            beta: self.loss.beta,
            k_target: self.loss.k_target,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.train.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Every violated constraint, each prefixed by its field path.
    pub fn problems(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .model_config()
            .problems()
            .into_iter()
            .map(|p| if p.starts_with("router") { p } else { format!("model.{p}") })
            .collect();
        if self.router.kind == RouterName::Topk && self.router.top_k == 0 {
            out.push("router.top_k: must be >= 1".into());
        }
        let l = &self.loss;
        if !(l.alpha.is_finite() && l.alpha >= 0.0) {
            out.push("loss.alpha: must be finite and >= 0".into());
        }
        if !(l.beta.is_finite() && l.beta >= 0.0) {
            out.push("loss.beta: must be finite and >= 0".into());
        }
        if l.k_target == 0 {
            out.push("loss.k_target: must be >= 1".into());
        }
        let t = &self.train;
        if t.epochs == 0 {
            out.push("train.epochs: must be >= 1".into());
        }
        if t.batch_size == 0 {
            out.push("train.batch_size: must be >= 1".into());
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            out.push("train.lr: must be positive".into());
        }
        if !(t.lr_decay.is_finite() && t.lr_decay > 0.0) {
            out.push("train.lr_decay: must be positive".into());
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            out.push("train.weight_decay: must be >= 0".into());
        }
        if !(t.grad_clip.is_finite() && t.grad_clip >= 0.0) {
            out.push("train.grad_clip: must be >= 0".into());
        }
        if t.log_every == 0 {
            out.push("train.log_every: must be >= 1".into());
        }
        out.extend(self.data.problems());
        if self.model.vocab < 16 {
            out.push("model.vocab: the synthetic task needs at least 16 tokens".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p.join("; ")))
        }
    }

    /// SHA-256 over the fields that determine checkpoint layout and meaning.
    pub fn digest(&self) -> [u8; 32] {
        model_digest(&self.model_config())
    }
}

pub fn model_digest(model: &ModelConfig) -> [u8; 32] {
    let canonical = serde_json::to_string(model).expect("model config serializes");
    Sha256::digest(canonical.as_bytes()).into()
}
