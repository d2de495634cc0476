//! Declarative run configuration: one JSON document, one section per module.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LormError, Result};
use crate::model::{AttentionMode, BackboneConfig};
use crate::monitor::MonitorConfig;
use crate::sequence::DEFAULT_PATCH_LEN;
use crate::signal::WindowingConfig;
use crate::synth::{Harmonic, SynthConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowingSection {
    pub window_len: usize,
    pub context_len: usize,
    /// Defaults to `window_len` (non-overlapping windows).
    pub stride: Option<usize>,
    pub train_fraction: f64,
}

impl Default for WindowingSection {
    fn default() -> Self {
        Self { window_len: 321, context_len: 320, stride: None, train_fraction: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSection {
    pub patch_len: usize,
}

impl Default for PatchSection {
    fn default() -> Self {
        Self { patch_len: DEFAULT_PATCH_LEN }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub k: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self { k: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub attention_mode: AttentionMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden_dim: 64, num_layers: 2, num_heads: 4, ffn_dim: 256, attention_mode: AttentionMode::Causal }
    }
}

/// Full-parameter phase on a synthetic corpus that stands in for a
/// pre-trained backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub train: TrainConfig,
    pub corpus: SynthConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            train: TrainConfig { freeze: false, max_epochs: 15, patience: 3, ..TrainConfig::default() },
            corpus: pretrain_corpus(),
        }
    }
}

/// A generic multi-tone corpus: different tones and phases from the
/// default synthetic machine, no degradation.
pub fn pretrain_corpus() -> SynthConfig {
    SynthConfig {
        harmonics: vec![
            vec![Harmonic::new(180.0, 0.9, 0.3), Harmonic::new(540.0, 0.5, 1.1)],
            vec![Harmonic::new(230.0, 1.0, 2.2), Harmonic::new(460.0, 0.3, 0.7)],
            vec![Harmonic::new(310.0, 0.7, 0.0), Harmonic::new(620.0, 0.6, 1.9)],
        ],
        noise_sigma: 0.05,
        degradation_rate: 0.0,
        seed: 1_000,
        ..SynthConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub wear_limit_um: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { wear_limit_um: crate::eval::ISO_WEAR_LIMIT_UM }
    }
}

/// Input and output locations. Unset entries resolve to fixed names under
/// the output directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data: Option<PathBuf>,
    pub wear: Option<PathBuf>,
    pub codebooks: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// `host:port` of a live sample stream; overrides `data` for `monitor`.
    pub stream_addr: Option<String>,
    pub hi: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub sample_rate_hz: f64,
    pub windowing: WindowingSection,
    pub patch: PatchSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub train: TrainConfig,
    pub monitor: MonitorConfig,
    pub eval: EvalSection,
    pub synth: SynthConfig,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sample_rate_hz: 10_000.0,
            windowing: WindowingSection::default(),
            patch: PatchSection::default(),
            tokenizer: TokenizerSection::default(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            train: TrainConfig { max_epochs: 30, patience: 5, ..TrainConfig::default() },
            monitor: MonitorConfig { buffer_len: 100, threshold: 0.20 },
            eval: EvalSection::default(),
            synth: SynthConfig::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LormError::InvalidConfig(format!("config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialisation")
    }

    /// Reads `path` (or the defaults), applies `section.key=value`
    /// overrides in order, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| LormError::InvalidConfig(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| LormError::InvalidConfig(format!("config: {e}")))?
            }
            None => serde_json::to_value(Self::default()).expect("config serialisation"),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| LormError::InvalidConfig(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.windowing()?;
        let w = &self.windowing;
        if !(0.0..=1.0).contains(&w.train_fraction) || w.train_fraction == 0.0 {
            return Err(LormError::InvalidConfig("windowing.train_fraction must lie in (0, 1]".into()));
        }
        if self.patch.patch_len == 0 {
            return Err(LormError::InvalidConfig("patch.patch_len must be at least 1".into()));
        }
        if self.tokenizer.k == 0 {
            return Err(LormError::InvalidConfig("tokenizer.k must be at least 1".into()));
        }
        if self.sample_rate_hz.is_nan() || self.sample_rate_hz <= 0.0 {
            return Err(LormError::InvalidConfig("sample_rate_hz must be positive".into()));
        }
        self.backbone(self.synth.channels)?;
        self.pretrain.train.validate()?;
        self.train.validate()?;
        self.monitor.validate()?;
        self.synth.validate()?;
        self.pretrain.corpus.validate()?;
        Ok(())
    }

    pub fn windowing(&self) -> Result<WindowingConfig> {
        let w = &self.windowing;
        let cfg = WindowingConfig::new(w.window_len, w.context_len)?;
        match w.stride {
            Some(s) => cfg.with_stride(s),
            None => Ok(cfg),
        }
    }

    pub fn backbone(&self, channels: usize) -> Result<BackboneConfig> {
        let m = &self.model;
        let mut cfg = BackboneConfig::for_task(self.windowing.context_len, self.patch.patch_len, channels, self.tokenizer.k);
        cfg.hidden_dim = m.hidden_dim;
        cfg.num_layers = m.num_layers;
        cfg.num_heads = m.num_heads;
        cfg.ffn_dim = m.ffn_dim;
        cfg.attention_mode = m.attention_mode;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sets the scalar at a dotted path, e.g. `train.learning_rate=0.01`.
/// The value is parsed as JSON when possible and kept as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| LormError::InvalidConfig(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(LormError::InvalidConfig(format!("override key `{key}` is malformed")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| LormError::InvalidConfig(format!("`{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("non-empty key")
}
