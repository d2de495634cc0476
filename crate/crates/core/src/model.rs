//! Backbone configuration, the canonical parameter layout, initialisation and
//! the frozen/trainable partition.
//!
//! All parameters are stored as 2-D `f64` arrays (vectors are `1 x n`) in a
//! fixed canonical order:
//!
//! ```text
//! embed (h x d), pos (NC x d),
//! per layer: attn q/k/v/o weight (d x d) + bias (1 x d),
//! per layer: ffn in weight (d x f) + bias (1 x f), out weight (f x d) + bias (1 x d),
//! per layer: ln1 gain/bias, ln2 gain/bias; final norm gain/bias; head norm gain/bias,
//! class matrix (d x KC)
//! ```
//!
//! Values are kept representable in `f32` (the checkpoint storage type) by
//! rounding after initialisation and after every optimiser step, so that a
//! checkpoint round trip is exact.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LormError, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Patch sequence length `N * C`, fixed at build time.
    pub max_seq_len: usize,
    pub attention_mode: AttentionMode,
    /// Tokens per channel.
    pub k: usize,
    pub channels: usize,
    pub patch_len: usize,
}

impl BackboneConfig {
    /// Desk-scale defaults (d=64, L=2, 4 heads, ffn 256, causal) for a task.
    pub fn for_task(context_len: usize, patch_len: usize, channels: usize, k: usize) -> Self {
        let n = if patch_len == 0 { 0 } else { context_len.div_ceil(patch_len) };
        Self {
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 256,
            max_seq_len: n * channels,
            attention_mode: AttentionMode::Causal,
            k,
            channels,
            patch_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LormError::InvalidConfig(msg));
        if self.hidden_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 || self.patch_len == 0 {
            return bad("model sizes must be positive".into());
        }
        if self.hidden_dim < self.num_heads || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "num_heads ({}) must divide hidden_dim ({})",
                self.num_heads, self.hidden_dim
            ));
        }
        if self.k == 0 || self.channels == 0 {
            return bad("K and channel count must be positive".into());
        }
        if self.max_seq_len == 0 || !self.max_seq_len.is_multiple_of(self.channels) {
            return bad(format!(
                "max_seq_len ({}) must be a positive multiple of the channel count ({})",
                self.max_seq_len, self.channels
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn patches_per_channel(&self) -> usize {
        self.max_seq_len / self.channels
    }

    pub fn num_tensors(&self) -> usize {
        16 * self.num_layers + 7
    }

    /// Canonical parameter order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        use ParamId::*;
        let l = self.num_layers;
        let mut ids = vec![Embed, Pos];
        for i in 0..l {
            ids.extend([
                AttnQueryWeight(i),
                AttnQueryBias(i),
                AttnKeyWeight(i),
                AttnKeyBias(i),
                AttnValueWeight(i),
                AttnValueBias(i),
                AttnOutWeight(i),
                AttnOutBias(i),
            ]);
        }
        for i in 0..l {
            ids.extend([FfnInWeight(i), FfnInBias(i), FfnOutWeight(i), FfnOutBias(i)]);
        }
        for i in 0..l {
            ids.extend([Ln1Gain(i), Ln1Bias(i), Ln2Gain(i), Ln2Bias(i)]);
        }
        ids.extend([FinalNormGain, FinalNormBias, HeadNormGain, HeadNormBias, ClassMatrix]);
        ids
    }

    /// Position of `id` in the canonical order.
    pub fn index_of(&self, id: ParamId) -> usize {
        use ParamId::*;
        let l = self.num_layers;
        let attn = |i: usize, j: usize| 2 + 8 * i + j;
        let ffn = |i: usize, j: usize| 2 + 8 * l + 4 * i + j;
        let norm = |i: usize, j: usize| 2 + 12 * l + 4 * i + j;
        match id {
            Embed => 0,
            Pos => 1,
            AttnQueryWeight(i) => attn(i, 0),
            AttnQueryBias(i) => attn(i, 1),
            AttnKeyWeight(i) => attn(i, 2),
            AttnKeyBias(i) => attn(i, 3),
            AttnValueWeight(i) => attn(i, 4),
            AttnValueBias(i) => attn(i, 5),
            AttnOutWeight(i) => attn(i, 6),
            AttnOutBias(i) => attn(i, 7),
            FfnInWeight(i) => ffn(i, 0),
            FfnInBias(i) => ffn(i, 1),
            FfnOutWeight(i) => ffn(i, 2),
            FfnOutBias(i) => ffn(i, 3),
            Ln1Gain(i) => norm(i, 0),
            Ln1Bias(i) => norm(i, 1),
            Ln2Gain(i) => norm(i, 2),
            Ln2Bias(i) => norm(i, 3),
            FinalNormGain => 2 + 16 * l,
            FinalNormBias => 3 + 16 * l,
            HeadNormGain => 4 + 16 * l,
            HeadNormBias => 5 + 16 * l,
            ClassMatrix => 6 + 16 * l,
        }
    }

    pub fn shape_of(&self, id: ParamId) -> (usize, usize) {
        use ParamId::*;
        let (d, f) = (self.hidden_dim, self.ffn_dim);
        match id {
            Embed => (self.patch_len, d),
            Pos => (self.max_seq_len, d),
            AttnQueryWeight(_) | AttnKeyWeight(_) | AttnValueWeight(_) | AttnOutWeight(_) => (d, d),
            FfnInWeight(_) => (d, f),
            FfnInBias(_) => (1, f),
            FfnOutWeight(_) => (f, d),
            ClassMatrix => (d, self.k * self.channels),
            _ => (1, d),
        }
    }
}

/// Identifier of one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Embed,
    Pos,
    AttnQueryWeight(usize),
    AttnQueryBias(usize),
    AttnKeyWeight(usize),
    AttnKeyBias(usize),
    AttnValueWeight(usize),
    AttnValueBias(usize),
    AttnOutWeight(usize),
    AttnOutBias(usize),
    FfnInWeight(usize),
    FfnInBias(usize),
    FfnOutWeight(usize),
    FfnOutBias(usize),
    Ln1Gain(usize),
    Ln1Bias(usize),
    Ln2Gain(usize),
    Ln2Bias(usize),
    FinalNormGain,
    FinalNormBias,
    HeadNormGain,
    HeadNormBias,
    ClassMatrix,
}

impl ParamId {
    /// Attention projections and feed-forward weights/biases.
    pub fn is_backbone_core(self) -> bool {
        use ParamId::*;
        matches!(
            self,
            AttnQueryWeight(_)
                | AttnQueryBias(_)
                | AttnKeyWeight(_)
                | AttnKeyBias(_)
                | AttnValueWeight(_)
                | AttnValueBias(_)
                | AttnOutWeight(_)
                | AttnOutBias(_)
                | FfnInWeight(_)
                | FfnInBias(_)
                | FfnOutWeight(_)
                | FfnOutBias(_)
        )
    }

    fn is_norm_gain(self) -> bool {
        matches!(self, ParamId::Ln1Gain(_) | ParamId::Ln2Gain(_) | ParamId::FinalNormGain | ParamId::HeadNormGain)
    }

    fn is_zero_init(self) -> bool {
        use ParamId::*;
        matches!(
            self,
            AttnQueryBias(_)
                | AttnKeyBias(_)
                | AttnValueBias(_)
                | AttnOutBias(_)
                | FfnInBias(_)
                | FfnOutBias(_)
                | Ln1Bias(_)
                | Ln2Bias(_)
                | FinalNormBias
                | HeadNormBias
        )
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ParamId::*;
        match self {
            Embed => write!(f, "embed"),
            Pos => write!(f, "pos"),
            AttnQueryWeight(i) => write!(f, "layers.{i}.attn.q.weight"),
            AttnQueryBias(i) => write!(f, "layers.{i}.attn.q.bias"),
            AttnKeyWeight(i) => write!(f, "layers.{i}.attn.k.weight"),
            AttnKeyBias(i) => write!(f, "layers.{i}.attn.k.bias"),
            AttnValueWeight(i) => write!(f, "layers.{i}.attn.v.weight"),
            AttnValueBias(i) => write!(f, "layers.{i}.attn.v.bias"),
            AttnOutWeight(i) => write!(f, "layers.{i}.attn.o.weight"),
            AttnOutBias(i) => write!(f, "layers.{i}.attn.o.bias"),
            FfnInWeight(i) => write!(f, "layers.{i}.ffn.in.weight"),
            FfnInBias(i) => write!(f, "layers.{i}.ffn.in.bias"),
            FfnOutWeight(i) => write!(f, "layers.{i}.ffn.out.weight"),
            FfnOutBias(i) => write!(f, "layers.{i}.ffn.out.bias"),
            Ln1Gain(i) => write!(f, "layers.{i}.ln1.gain"),
            Ln1Bias(i) => write!(f, "layers.{i}.ln1.bias"),
            Ln2Gain(i) => write!(f, "layers.{i}.ln2.gain"),
            Ln2Bias(i) => write!(f, "layers.{i}.ln2.bias"),
            FinalNormGain => write!(f, "final_norm.gain"),
            FinalNormBias => write!(f, "final_norm.bias"),
            HeadNormGain => write!(f, "head_norm.gain"),
            HeadNormBias => write!(f, "head_norm.bias"),
            ClassMatrix => write!(f, "head.class_matrix"),
        }
    }
}

/// All model weights in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: BackboneConfig,
    tensors: Vec<Array2<f64>>,
}

impl ModelParameters {
    /// Builds parameters from tensors in canonical order, checking shapes.
    pub fn from_tensors(config: BackboneConfig, tensors: Vec<Array2<f64>>) -> Result<Self> {
        config.validate()?;
        let ids = config.param_ids();
        if tensors.len() != ids.len() {
            return Err(LormError::InvalidConfig(format!(
                "expected {} tensors, got {}",
                ids.len(),
                tensors.len()
            )));
        }
        for (id, t) in ids.iter().zip(&tensors) {
            if t.dim() != config.shape_of(*id) {
                return Err(LormError::InvalidConfig(format!("{id} has shape {:?}", t.dim())));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[self.config.index_of(id)]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        let i = self.config.index_of(id);
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.config.param_ids().into_iter().zip(self.tensors.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_storage(&mut self) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v as f32 as f64);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over the bit patterns of the listed tensors, in canonical order.
    pub fn hash_of(&self, ids: &BTreeSet<ParamId>) -> String {
        let mut hasher = Sha256::new();
        for id in self.config.param_ids().into_iter().filter(|id| ids.contains(id)) {
            hasher.update(id.to_string().as_bytes());
            for v in self.get(id).iter() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Draws every weight from `N(0, 0.02)` truncated at two standard deviations;
/// linear biases and layer-norm biases start at 0, layer-norm gains at 1.
pub fn init_model(cfg: &BackboneConfig, seed: u64) -> Result<ModelParameters> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let tensors = cfg
        .param_ids()
        .into_iter()
        .map(|id| {
            let shape = cfg.shape_of(id);
            if id.is_norm_gain() {
                Array2::ones(shape)
            } else if id.is_zero_init() {
                Array2::zeros(shape)
            } else {
                Array2::from_shape_simple_fn(shape, || truncated(&normal, &mut rng))
            }
        })
        .collect();
    let mut params = ModelParameters { config: cfg.clone(), tensors };
    params.round_to_storage();
    Ok(params)
}

fn truncated(normal: &Normal<f64>, rng: &mut impl Rng) -> f64 {
    loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * INIT_STD {
            return v;
        }
    }
}

/// Disjoint split of all parameter tensors into trainable and frozen sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterPartition {
    pub trainable: BTreeSet<ParamId>,
    pub frozen: BTreeSet<ParamId>,
}

impl ParameterPartition {
    /// Everything trainable (used for the backbone pretraining phase).
    pub fn all_trainable(cfg: &BackboneConfig) -> Self {
        Self { trainable: cfg.param_ids().into_iter().collect(), frozen: BTreeSet::new() }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable.contains(&id)
    }

    /// Trainable flags in canonical order.
    pub fn mask(&self, cfg: &BackboneConfig) -> Vec<bool> {
        cfg.param_ids().into_iter().map(|id| self.is_trainable(id)).collect()
    }

    pub fn count_scalars(set: &BTreeSet<ParamId>, cfg: &BackboneConfig) -> usize {
        set.iter().map(|&id| {
            let (r, c) = cfg.shape_of(id);
            r * c
        }).sum()
    }
}

/// Attention and feed-forward tensors frozen; embeddings, positional
/// embedding, every layer norm and the class matrix trainable.
pub fn partition_parameters(params: &ModelParameters) -> ParameterPartition {
    let (frozen, trainable): (BTreeSet<_>, BTreeSet<_>) =
        params.config.param_ids().into_iter().partition(|id| id.is_backbone_core());
    ParameterPartition { trainable, frozen }
}
