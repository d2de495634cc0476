//! Per-channel k-means codebooks over target segments.
//!
//! Each channel gets its own vocabulary of `K` centroids of dimension `W - S`.
//! A target segment is turned into a token by nearest-centroid assignment.
//! Tokens are 0-based.

use std::fs;
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LormError, Result};
use crate::signal::{split_context_target, SignalWindow};

pub const CODEBOOK_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 10;
pub const MAX_ITERATIONS: usize = 100;
pub const RELATIVE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub channel_index: usize,
    pub centroids: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Nearest centroid by Euclidean distance; ties go to the lowest index.
    pub fn assign(&self, target: &[f64]) -> Result<usize> {
        if target.len() != self.dim() {
            return Err(LormError::DimensionMismatch { expected: self.dim(), actual: target.len() });
        }
        Ok(nearest(target, &self.centroids).0)
    }
}

/// Token for one channel's target segment.
pub fn assign_token(target: &[f64], codebook: &Codebook) -> Result<usize> {
    codebook.assign(target)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVector {
    pub tokens: Vec<usize>,
}

impl TokenVector {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One codebook per channel, all sharing `K` and the target dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    pub codebooks: Vec<Codebook>,
    pub channel_names: Vec<String>,
    pub k: usize,
    pub target_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct CodebookFile {
    version: u32,
    #[serde(rename = "K")]
    k: usize,
    target_dim: usize,
    channels: Vec<ChannelEntry>,
}

#[derive(Serialize, Deserialize)]
struct ChannelEntry {
    name: String,
    centroids: Vec<Vec<f64>>,
}

impl CodebookSet {
    pub fn new(codebooks: Vec<Codebook>, channel_names: Vec<String>) -> Result<Self> {
        let first = codebooks.first().ok_or(LormError::EmptyInput)?;
        let (k, target_dim) = (first.k(), first.dim());
        if k == 0 {
            return Err(LormError::InvalidConfig("codebook with no centroids".into()));
        }
        if channel_names.len() != codebooks.len() {
            return Err(LormError::ChannelMismatch { expected: codebooks.len(), actual: channel_names.len() });
        }
        for (c, cb) in codebooks.iter().enumerate() {
            if cb.k() != k || cb.centroids.iter().any(|m| m.len() != target_dim) {
                return Err(LormError::InvalidConfig(format!("codebook {c} disagrees on K or target_dim")));
            }
            if cb.centroids.iter().flatten().any(|v| !v.is_finite()) {
                return Err(LormError::NonFinite(format!("codebook {c}")));
            }
        }
        Ok(Self { codebooks, channel_names, k, target_dim })
    }

    pub fn channels(&self) -> usize {
        self.codebooks.len()
    }

    /// Tokenises a `(W - S) x C` target block.
    pub fn tokenize(&self, target: ArrayView2<'_, f64>) -> Result<TokenVector> {
        if target.ncols() != self.channels() {
            return Err(LormError::ChannelMismatch { expected: self.channels(), actual: target.ncols() });
        }
        let tokens = self
            .codebooks
            .iter()
            .zip(target.columns())
            .map(|(cb, col)| cb.assign(&col.to_vec()))
            .collect::<Result<_>>()?;
        Ok(TokenVector { tokens })
    }

    pub fn to_json(&self) -> String {
        let file = CodebookFile {
            version: CODEBOOK_FORMAT_VERSION,
            k: self.k,
            target_dim: self.target_dim,
            channels: self
                .codebooks
                .iter()
                .zip(&self.channel_names)
                .map(|(cb, name)| ChannelEntry { name: name.clone(), centroids: cb.centroids.clone() })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("codebook serialisation")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CodebookFile = serde_json::from_str(text)?;
        if file.version != CODEBOOK_FORMAT_VERSION {
            return Err(LormError::InvalidConfig(format!("unsupported codebook version {}", file.version)));
        }
        let names = file.channels.iter().map(|c| c.name.clone()).collect();
        let codebooks = file
            .channels
            .into_iter()
            .enumerate()
            .map(|(channel_index, c)| Codebook { channel_index, centroids: c.centroids })
            .collect();
        let set = Self::new(codebooks, names)?;
        if set.k != file.k || set.target_dim != file.target_dim {
            return Err(LormError::InvalidConfig("codebook header disagrees with centroids".into()));
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical JSON document, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Applies [`assign_token`] per channel to the target rows of a window.
pub fn tokenize_window(window: &SignalWindow, context_len: usize, codebooks: &CodebookSet) -> Result<TokenVector> {
    let (_, target) = split_context_target(window, context_len)?;
    codebooks.tokenize(target.view())
}

/// Result of a k-means run.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++ seeding: the first centre uniformly, each further centre with
/// probability proportional to its squared distance from the chosen ones.
pub fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centres = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > r {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centres.push(points[pick].clone());
        let newest = centres.last().expect("non-empty");
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, newest));
        }
    }
    centres
}

/// Lloyd iterations from the given initial centres.
///
/// Stops when the relative inertia change drops below [`RELATIVE_TOLERANCE`]
/// or after [`MAX_ITERATIONS`] updates. A cluster left empty takes the point
/// farthest from its current centroid.
pub fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeansFit {
    let k = centroids.len();
    let dim = centroids[0].len();
    let mut labels = vec![0usize; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut prev: Option<f64> = None;

    while iterations < MAX_ITERATIONS {
        let mut inertia = 0.0;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (label, d) = nearest(p, &centroids);
            labels[i] = label;
            dists[i] = d;
            inertia += d;
        }
        history.push(inertia);
        if let Some(p) = prev {
            if p <= 0.0 || (p - inertia) <= RELATIVE_TOLERANCE * p {
                break;
            }
        }
        prev = Some(inertia);

        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let donor = (0..points.len())
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = donor {
                counts[labels[i]] -= 1;
                labels[i] = j;
                counts[j] = 1;
                dists[i] = 0.0;
            }
        }

        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &l) in points.iter().zip(&labels) {
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        iterations += 1;
    }

    let inertia = points.iter().map(|p| nearest(p, &centroids).1).sum();
    KMeansFit { centroids, inertia, history, iterations }
}

/// Seeded k-means++ followed by Lloyd.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 {
        return Err(LormError::InvalidConfig("K must be at least 1".into()));
    }
    if points.len() < k {
        return Err(LormError::InsufficientSamples { needed: k, available: points.len() });
    }
    let dim = points[0].len();
    if let Some(bad) = points.iter().find(|p| p.len() != dim) {
        return Err(LormError::DimensionMismatch { expected: dim, actual: bad.len() });
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(LormError::NonFinite("k-means input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = kmeans_plus_plus(points, k, &mut rng);
    Ok(lloyd(points, init))
}

pub fn fit_codebook(targets: &[Vec<f64>], k: usize, seed: u64) -> Result<Codebook> {
    let fit = kmeans(targets, k, seed)?;
    Ok(Codebook { channel_index: 0, centroids: fit.centroids })
}

/// Fits one codebook per channel from the target segments of (normalised)
/// training windows. Channel `c` uses seed `seed + c`.
pub fn fit_codebooks(
    windows: &[SignalWindow],
    context_len: usize,
    k: usize,
    seed: u64,
    channel_names: &[String],
) -> Result<CodebookSet> {
    let first = windows.first().ok_or(LormError::EmptyInput)?;
    let channels = first.channels();
    let targets: Vec<_> = windows
        .iter()
        .map(|w| split_context_target(w, context_len).map(|(_, t)| t))
        .collect::<Result<_>>()?;
    let codebooks = (0..channels)
        .into_par_iter()
        .map(|c| {
            let points: Vec<Vec<f64>> = targets.iter().map(|t| t.column(c).to_vec()).collect();
            let mut cb = fit_codebook(&points, k, seed.wrapping_add(c as u64))?;
            cb.channel_index = c;
            Ok(cb)
        })
        .collect::<Result<Vec<_>>>()?;
    CodebookSet::new(codebooks, channel_names.to_vec())
}

/// Convenience for a single target vector held in an ndarray view.
pub fn assign_view(target: ArrayView1<'_, f64>, codebook: &Codebook) -> Result<usize> {
    codebook.assign(&target.to_vec())
}
