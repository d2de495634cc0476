//! Patching a context segment and flattening all channels into one
//! channel-major patch sequence.

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{LormError, Result};

pub const DEFAULT_PATCH_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub patches_per_channel: usize,
    pub channel_count: usize,
}

impl PatchConfig {
    /// `N = ceil(S / h)`; the last patch of each channel is zero padded when
    /// `h` does not divide `S`.
    pub fn new(context_len: usize, patch_len: usize, channel_count: usize) -> Result<Self> {
        if patch_len == 0 || context_len == 0 || channel_count == 0 {
            return Err(LormError::InvalidConfig(format!(
                "patching needs positive sizes (S={context_len}, h={patch_len}, C={channel_count})"
            )));
        }
        Ok(Self { patch_len, patches_per_channel: context_len.div_ceil(patch_len), channel_count })
    }

    pub fn seq_len(&self) -> usize {
        self.patches_per_channel * self.channel_count
    }
}

/// `N*C x h` channel-major patch matrix: channel `c` occupies rows
/// `c*N .. c*N + N` in temporal order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub rows: Array2<f64>,
    pub patches_per_channel: usize,
    pub channels: usize,
}

impl PatchSequence {
    pub fn seq_len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn patch_len(&self) -> usize {
        self.rows.ncols()
    }

    /// Inverse of [`build_mcps`]; `context_len` strips the padding.
    pub fn unflatten(&self, context_len: usize) -> Array2<f64> {
        let (n, h) = (self.patches_per_channel, self.patch_len());
        let mut out = Array2::zeros((context_len, self.channels));
        for c in 0..self.channels {
            for t in 0..context_len {
                out[[t, c]] = self.rows[[c * n + t / h, t % h]];
            }
        }
        out
    }
}

/// Splits one channel's context into `ceil(S/h)` patches of length `h`.
pub fn patch_channel(column: ArrayView1<'_, f64>, patch_len: usize) -> Array2<f64> {
    let s_len = column.len();
    let n = s_len.div_ceil(patch_len);
    let mut patches = Array2::zeros((n, patch_len));
    for (t, &v) in column.iter().enumerate() {
        patches[[t / patch_len, t % patch_len]] = v;
    }
    patches
}

/// Builds the multi-sensor context patch sequence from an `S x C` context.
pub fn build_mcps(context: ArrayView2<'_, f64>, patch_len: usize) -> Result<PatchSequence> {
    let (s_len, channels) = context.dim();
    let cfg = PatchConfig::new(s_len, patch_len, channels)?;
    let n = cfg.patches_per_channel;
    let mut rows = Array2::zeros((cfg.seq_len(), patch_len));
    for (c, col) in context.columns().into_iter().enumerate() {
        rows.slice_mut(s![c * n..(c + 1) * n, ..]).assign(&patch_channel(col, patch_len));
    }
    Ok(PatchSequence { rows, patches_per_channel: n, channels })
}
