//! Forward and reverse-mode passes of the token-prediction network.
//!
//! ```text
//! E  = P W_E                      (NC x d)
//! E~ = E + P_pos
//! Z  = pre-norm Transformer(E~)   (L blocks, final layer norm)
//! g  = mean over rows of Z
//! u  = LayerNorm(GELU(g)),  v = u W_c     (1 x KC)
//! pi_c = softmax(v[c*K .. (c+1)*K])
//! ```
//!
//! The backward pass is written by hand against the cached activations of
//! [`forward_cached`]. Gradients are only materialised for tensors flagged in
//! the `needs_grad` mask; activations are still propagated through frozen
//! blocks so earlier trainable tensors receive their gradient.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{LormError, Result};
use crate::model::{AttentionMode, ModelParameters, ParamId};
use crate::sequence::PatchSequence;
use crate::tokenizer::TokenVector;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Numerically stable softmax of a slice.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-channel predicted token distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistributions {
    pub per_channel: Vec<Vec<f64>>,
}

impl TokenDistributions {
    pub fn channels(&self) -> usize {
        self.per_channel.len()
    }

    /// Most probable token per channel (lowest index on ties).
    pub fn argmax(&self) -> TokenVector {
        let tokens = self
            .per_channel
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect();
        TokenVector { tokens }
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub e: Array2<f64>,
    pub e_tilde: Array2<f64>,
    pub z: Array2<f64>,
    pub g: Array1<f64>,
    pub u: Array1<f64>,
    pub v: Array1<f64>,
    pub distributions: TokenDistributions,
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array2<f64>, bias: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        *is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let s = *is;
        row.mapv_inplace(|v| (v - mean) * s);
    }
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, inv_std })
}

/// Returns `(dx, dgain, dbias)`.
fn layer_norm_backward(dy: &Array2<f64>, cache: &LnCache, gain: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = dy.ncols() as f64;
    let dgain = (dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * gain;
    let mut dx = Array2::zeros(dy.dim());
    for (((mut out, dh), xh), &is) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let sum_dh = dh.sum();
        let sum_dh_xh = dh.dot(&xh);
        Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &a, &b| {
            *o = is / d * (d * a - sum_dh - b * sum_dh_xh);
        });
    }
    (dx, dgain, dbias)
}

struct BlockCache {
    x_in: Array2<f64>,
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    b: Array2<f64>,
    h_pre: Array2<f64>,
    h_act: Array2<f64>,
}

/// Activations retained for the backward pass.
pub struct ForwardCache {
    pub trace: ForwardTrace,
    patches: Array2<f64>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    head_ln: LnCache,
}

fn check_sequence(mcps: &PatchSequence, params: &ModelParameters) -> Result<()> {
    let cfg = &params.config;
    if mcps.seq_len() != cfg.max_seq_len {
        return Err(LormError::SequenceLength { expected: cfg.max_seq_len, actual: mcps.seq_len() });
    }
    if mcps.patch_len() != cfg.patch_len {
        return Err(LormError::DimensionMismatch { expected: cfg.patch_len, actual: mcps.patch_len() });
    }
    Ok(())
}

/// `E = P W_E` and `E~ = E + P_pos`.
pub fn embed_and_position(mcps: &PatchSequence, params: &ModelParameters) -> Result<(Array2<f64>, Array2<f64>)> {
    check_sequence(mcps, params)?;
    let e = mcps.rows.dot(params.get(ParamId::Embed));
    let e_tilde = &e + params.get(ParamId::Pos);
    Ok((e, e_tilde))
}

fn block_forward(x: Array2<f64>, params: &ModelParameters, layer: usize) -> (Array2<f64>, BlockCache) {
    use ParamId::*;
    let cfg = &params.config;
    let n = x.nrows();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let (a, ln1) = layer_norm(&x, params.get(Ln1Gain(layer)), params.get(Ln1Bias(layer)));
    let q = a.dot(params.get(AttnQueryWeight(layer))) + params.get(AttnQueryBias(layer));
    let k = a.dot(params.get(AttnKeyWeight(layer))) + params.get(AttnKeyBias(layer));
    let v = a.dot(params.get(AttnValueWeight(layer))) + params.get(AttnValueBias(layer));

    let mut o = Array2::zeros((n, cfg.hidden_dim));
    let mut probs = Vec::with_capacity(cfg.num_heads);
    for head in 0..cfg.num_heads {
        let cols = s![.., head * dh..(head + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
            let limit = match cfg.attention_mode {
                AttentionMode::Causal => i + 1,
                AttentionMode::Bidirectional => n,
            };
            let p = softmax(&row.as_slice().expect("contiguous")[..limit]);
            for (j, r) in row.iter_mut().enumerate() {
                *r = if j < limit { p[j] } else { 0.0 };
            }
        }
        o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }

    let x_mid = &x + &(o.dot(params.get(AttnOutWeight(layer))) + params.get(AttnOutBias(layer)));
    let (b, ln2) = layer_norm(&x_mid, params.get(Ln2Gain(layer)), params.get(Ln2Bias(layer)));
    let h_pre = b.dot(params.get(FfnInWeight(layer))) + params.get(FfnInBias(layer));
    let h_act = h_pre.mapv(gelu);
    let out = &x_mid + &(h_act.dot(params.get(FfnOutWeight(layer))) + params.get(FfnOutBias(layer)));
    (out, BlockCache { x_in: x, ln1, a, q, k, v, probs, o, ln2, b, h_pre, h_act })
}

/// `L` pre-norm blocks followed by the final layer norm.
pub fn encode_context(e_tilde: &Array2<f64>, params: &ModelParameters) -> Array2<f64> {
    let mut x = e_tilde.clone();
    for layer in 0..params.config.num_layers {
        x = block_forward(x, params, layer).0;
    }
    layer_norm(&x, params.get(ParamId::FinalNormGain), params.get(ParamId::FinalNormBias)).0
}

/// Mean-pools `Z`, applies the head and splits scores into per-channel
/// softmax blocks. Returns `(g, u, v, distributions)`.
pub fn pool_and_predict(
    z: ArrayView2<'_, f64>,
    params: &ModelParameters,
) -> (Array1<f64>, Array1<f64>, Array1<f64>, TokenDistributions) {
    let (g, u, v, _) = head_forward(z, params);
    let dists = distributions_from_scores(&v, params.config.k);
    (g, u, v, dists)
}

fn head_forward(z: ArrayView2<'_, f64>, params: &ModelParameters) -> (Array1<f64>, Array1<f64>, Array1<f64>, LnCache) {
    let g = z.mean_axis(Axis(0)).expect("non-empty sequence");
    let a = g.mapv(gelu).insert_axis(Axis(0));
    let (u, head_ln) = layer_norm(&a, params.get(ParamId::HeadNormGain), params.get(ParamId::HeadNormBias));
    let v = u.dot(params.get(ParamId::ClassMatrix));
    (g, u.row(0).to_owned(), v.row(0).to_owned(), head_ln)
}

pub fn distributions_from_scores(v: &Array1<f64>, k: usize) -> TokenDistributions {
    let per_channel = v
        .as_slice()
        .expect("contiguous scores")
        .chunks(k)
        .map(softmax)
        .collect();
    TokenDistributions { per_channel }
}

/// Full forward pass.
pub fn forward(mcps: &PatchSequence, params: &ModelParameters) -> Result<ForwardTrace> {
    Ok(forward_cached(mcps, params)?.trace)
}

pub fn forward_cached(mcps: &PatchSequence, params: &ModelParameters) -> Result<ForwardCache> {
    let (e, e_tilde) = embed_and_position(mcps, params)?;
    let mut blocks = Vec::with_capacity(params.config.num_layers);
    let mut x = e_tilde.clone();
    for layer in 0..params.config.num_layers {
        let (out, cache) = block_forward(x, params, layer);
        blocks.push(cache);
        x = out;
    }
    let (z, final_ln) = layer_norm(&x, params.get(ParamId::FinalNormGain), params.get(ParamId::FinalNormBias));
    let (g, u, v, head_ln) = head_forward(z.view(), params);
    let distributions = distributions_from_scores(&v, params.config.k);
    Ok(ForwardCache {
        trace: ForwardTrace { e, e_tilde, z, g, u, v, distributions },
        patches: mcps.rows.clone(),
        blocks,
        final_ln,
        head_ln,
    })
}

/// Per-tensor gradients in canonical order; `None` where not requested.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn empty(num_tensors: usize) -> Self {
        Self { tensors: vec![None; num_tensors] }
    }

    pub fn get(&self, params: &ModelParameters, id: ParamId) -> Option<&Array2<f64>> {
        self.tensors[params.config.index_of(id)].as_ref()
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.tensors.iter_mut().zip(&other.tensors) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => *m += t,
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors.iter_mut().flatten() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradient of the mean channel cross-entropy with respect to the scores `v`.
pub fn loss_score_grad(dists: &TokenDistributions, tokens: &TokenVector) -> Array1<f64> {
    let c = dists.channels() as f64;
    let mut grad = Vec::new();
    for (p, &y) in dists.per_channel.iter().zip(&tokens.tokens) {
        grad.extend(p.iter().enumerate().map(|(k, &pk)| (pk - if k == y { 1.0 } else { 0.0 }) / c));
    }
    Array1::from(grad)
}

/// Backpropagates `dv` (gradient of the objective w.r.t. the scores).
pub fn backward(cache: &ForwardCache, params: &ModelParameters, dv: &Array1<f64>, needs_grad: &[bool]) -> Gradients {
    use ParamId::*;
    let cfg = &params.config;
    let mut grads = Gradients::empty(cfg.num_tensors());
    let want = |id: ParamId| needs_grad[cfg.index_of(id)];
    let put = |grads: &mut Gradients, id: ParamId, g: Array2<f64>| {
        grads.tensors[cfg.index_of(id)] = Some(g);
    };

    let dv2 = dv.clone().insert_axis(Axis(0));
    let u2 = cache.trace.u.clone().insert_axis(Axis(0));
    if want(ClassMatrix) {
        put(&mut grads, ClassMatrix, u2.t().dot(&dv2));
    }
    let du = dv2.dot(&params.get(ClassMatrix).t());
    let (da, dgain, dbias) = layer_norm_backward(&du, &cache.head_ln, params.get(HeadNormGain));
    if want(HeadNormGain) {
        put(&mut grads, HeadNormGain, dgain);
    }
    if want(HeadNormBias) {
        put(&mut grads, HeadNormBias, dbias);
    }
    let g = &cache.trace.g;
    let dg = Zip::from(da.row(0)).and(g).map_collect(|&d, &x| d * gelu_grad(x));
    let n = cache.trace.z.nrows();
    let dz = Array2::from_shape_fn((n, cfg.hidden_dim), |(_, j)| dg[j] / n as f64);

    let (mut dx, dgain, dbias) = layer_norm_backward(&dz, &cache.final_ln, params.get(FinalNormGain));
    if want(FinalNormGain) {
        put(&mut grads, FinalNormGain, dgain);
    }
    if want(FinalNormBias) {
        put(&mut grads, FinalNormBias, dbias);
    }

    for layer in (0..cfg.num_layers).rev() {
        dx = block_backward(dx, &cache.blocks[layer], params, layer, &want, &mut grads);
    }

    if want(Pos) {
        put(&mut grads, Pos, dx.clone());
    }
    if want(Embed) {
        put(&mut grads, Embed, cache.patches.t().dot(&dx));
    }
    grads
}

fn bias_grad(d: &Array2<f64>) -> Array2<f64> {
    d.sum_axis(Axis(0)).insert_axis(Axis(0))
}

fn block_backward(
    dx_out: Array2<f64>,
    c: &BlockCache,
    params: &ModelParameters,
    layer: usize,
    want: &dyn Fn(ParamId) -> bool,
    grads: &mut Gradients,
) -> Array2<f64> {
    use ParamId::*;
    let cfg = &params.config;
    let mut put = |id: ParamId, g: Array2<f64>| {
        grads.tensors[cfg.index_of(id)] = Some(g);
    };

    // Feed-forward branch.
    if want(FfnOutWeight(layer)) {
        put(FfnOutWeight(layer), c.h_act.t().dot(&dx_out));
    }
    if want(FfnOutBias(layer)) {
        put(FfnOutBias(layer), bias_grad(&dx_out));
    }
    let mut dh = dx_out.dot(&params.get(FfnOutWeight(layer)).t());
    Zip::from(&mut dh).and(&c.h_pre).for_each(|d, &x| *d *= gelu_grad(x));
    if want(FfnInWeight(layer)) {
        put(FfnInWeight(layer), c.b.t().dot(&dh));
    }
    if want(FfnInBias(layer)) {
        put(FfnInBias(layer), bias_grad(&dh));
    }
    let db = dh.dot(&params.get(FfnInWeight(layer)).t());
    let (dx_ln2, dg2, db2) = layer_norm_backward(&db, &c.ln2, params.get(Ln2Gain(layer)));
    if want(Ln2Gain(layer)) {
        put(Ln2Gain(layer), dg2);
    }
    if want(Ln2Bias(layer)) {
        put(Ln2Bias(layer), db2);
    }
    let dx_mid = dx_out + &dx_ln2;

    // Attention branch.
    if want(AttnOutWeight(layer)) {
        put(AttnOutWeight(layer), c.o.t().dot(&dx_mid));
    }
    if want(AttnOutBias(layer)) {
        put(AttnOutBias(layer), bias_grad(&dx_mid));
    }
    let d_o = dx_mid.dot(&params.get(AttnOutWeight(layer)).t());
    let dh_dim = cfg.head_dim();
    let scale = 1.0 / (dh_dim as f64).sqrt();
    let mut dq = Array2::zeros(c.q.dim());
    let mut dk = Array2::zeros(c.k.dim());
    let mut dv = Array2::zeros(c.v.dim());
    for (head, p) in c.probs.iter().enumerate() {
        let cols = s![.., head * dh_dim..(head + 1) * dh_dim];
        let d_oh = d_o.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&d_oh));
        let mut ds = d_oh.dot(&c.v.slice(cols).t());
        for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot = ds_row.dot(&p_row);
            Zip::from(&mut ds_row).and(&p_row).for_each(|d, &pv| *d = pv * (*d - dot) * scale);
        }
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    for (w, b, d) in [
        (AttnQueryWeight(layer), AttnQueryBias(layer), &dq),
        (AttnKeyWeight(layer), AttnKeyBias(layer), &dk),
        (AttnValueWeight(layer), AttnValueBias(layer), &dv),
    ] {
        if want(w) {
            put(w, c.a.t().dot(d));
        }
        if want(b) {
            put(b, bias_grad(d));
        }
    }
    let da = dq.dot(&params.get(AttnQueryWeight(layer)).t())
        + dk.dot(&params.get(AttnKeyWeight(layer)).t())
        + dv.dot(&params.get(AttnValueWeight(layer)).t());
    let (dx_ln1, dg1, db1) = layer_norm_backward(&da, &c.ln1, params.get(Ln1Gain(layer)));
    if want(Ln1Gain(layer)) {
        put(Ln1Gain(layer), dg1);
    }
    if want(Ln1Bias(layer)) {
        put(Ln1Bias(layer), db1);
    }
    debug_assert_eq!(c.x_in.dim(), dx_mid.dim());
    dx_mid + &dx_ln1
}
