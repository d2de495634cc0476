//! Independent reference implementations used as test oracles. They work on
//! plain nested vectors and share no code with the library beyond the
//! parameter accessors.

#![allow(dead_code)]

use lorm::model::{AttentionMode, ModelParameters, ParamId};
use ndarray::Array2;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(a: &Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for j in 0..p {
            let mut s = 0.0;
            for k in 0..m {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn add_row(a: &Mat, bias: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(bias).map(|(x, b)| x + b).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let s = (var + 1e-5).sqrt();
    x.iter().zip(gain).zip(bias).map(|((v, g), b)| (v - mean) / s * g + b).collect()
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter().map(|r| layer_norm_row(r, gain, bias)).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Output of the reference forward pass.
pub struct Reference {
    pub e: Mat,
    pub z: Mat,
    pub g: Vec<f64>,
    pub distributions: Mat,
}

/// Textbook pre-norm Transformer forward pass with explicit loops.
pub fn reference_forward(patches: &Mat, params: &ModelParameters) -> Reference {
    use ParamId::*;
    let cfg = &params.config;
    let p = |id| to_mat(params.get(id));
    let v1 = |id| params.get(id).row(0).to_vec();
    let n = patches.len();
    let (d, heads) = (cfg.hidden_dim, cfg.num_heads);
    let dh = d / heads;

    let e = matmul(patches, &p(Embed));
    let mut x = add(&e, &p(Pos));
    for l in 0..cfg.num_layers {
        let a = layer_norm(&x, &v1(Ln1Gain(l)), &v1(Ln1Bias(l)));
        let q = add_row(&matmul(&a, &p(AttnQueryWeight(l))), &v1(AttnQueryBias(l)));
        let k = add_row(&matmul(&a, &p(AttnKeyWeight(l))), &v1(AttnKeyBias(l)));
        let v = add_row(&matmul(&a, &p(AttnValueWeight(l))), &v1(AttnValueBias(l)));
        let mut o = vec![vec![0.0; d]; n];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..n {
                let visible = if cfg.attention_mode == AttentionMode::Causal { i + 1 } else { n };
                let scores: Vec<f64> = (0..visible)
                    .map(|j| (0..dh).map(|t| q[i][off + t] * k[j][off + t]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let w = softmax(&scores);
                for t in 0..dh {
                    o[i][off + t] = (0..visible).map(|j| w[j] * v[j][off + t]).sum();
                }
            }
        }
        let attn = add_row(&matmul(&o, &p(AttnOutWeight(l))), &v1(AttnOutBias(l)));
        x = add(&x, &attn);
        let b = layer_norm(&x, &v1(Ln2Gain(l)), &v1(Ln2Bias(l)));
        let hidden: Mat = add_row(&matmul(&b, &p(FfnInWeight(l))), &v1(FfnInBias(l)))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let ffn = add_row(&matmul(&hidden, &p(FfnOutWeight(l))), &v1(FfnOutBias(l)));
        x = add(&x, &ffn);
    }
    let z = layer_norm(&x, &v1(FinalNormGain), &v1(FinalNormBias));
    let g: Vec<f64> = (0..d).map(|j| z.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let act: Vec<f64> = g.iter().map(|&x| gelu(x)).collect();
    let u = layer_norm_row(&act, &v1(HeadNormGain), &v1(HeadNormBias));
    let scores = matmul(&vec![u], &p(ClassMatrix)).remove(0);
    let distributions = scores.chunks(cfg.k).map(softmax).collect();
    Reference { e, z, g, distributions }
}

/// Lloyd's algorithm run until assignments stop changing. Empty clusters
/// keep their previous centre.
pub fn lloyd_oracle(points: &Mat, init: &Mat) -> (Mat, f64) {
    let mut centres = init.clone();
    let nearest = |p: &Vec<f64>, cs: &Mat| {
        let mut best = (0usize, f64::INFINITY);
        for (k, c) in cs.iter().enumerate() {
            let d: f64 = p.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    };
    let mut labels: Vec<usize> = vec![usize::MAX; points.len()];
    for _ in 0..10_000 {
        let new: Vec<usize> = points.iter().map(|p| nearest(p, &centres).0).collect();
        if new == labels {
            break;
        }
        labels = new;
        for (k, c) in centres.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == k).map(|(p, _)| p).collect();
            if !members.is_empty() {
                for (j, cj) in c.iter_mut().enumerate() {
                    *cj = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
                }
            }
        }
    }
    let inertia = points.iter().map(|p| nearest(p, &centres).1).sum();
    (centres, inertia)
}

/// Scalar count obtained by walking the declared tensor shapes by hand.
pub fn enumerate_parameter_count(d: usize, layers: usize, ffn: usize, h: usize, seq: usize, k: usize, c: usize) -> (usize, usize) {
    let attention = 4 * (d * d + d);
    let feed_forward = d * ffn + ffn + ffn * d + d;
    let norms = 4 * d;
    let frozen = layers * (attention + feed_forward);
    let trainable = h * d + seq * d + layers * norms + 4 * d + d * k * c;
    (frozen, trainable)
}

/// `(x - mean) / (std + eps)` with population statistics, column by column.
pub fn normalise_oracle(rows: &Mat, eps: f64) -> Mat {
    let t = rows.len() as f64;
    let c = rows[0].len();
    let mut out = rows.clone();
    for j in 0..c {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / t;
        let std = (rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / t).sqrt();
        for (o, r) in out.iter_mut().zip(rows) {
            o[j] = (r[j] - mean) / (std + eps);
        }
    }
    out
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
