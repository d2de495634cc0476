//! Self-supervised training of the token predictor.
//!
//! Each training window is split into context and target; the context is
//! patched into a sequence, the target is tokenised with the per-channel
//! codebooks, and the mean channel cross-entropy is minimised with Adam over
//! the trainable subset of parameters. The checkpoint with the lowest
//! validation objective is returned.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LormError, Result};
use crate::model::{ModelParameters, ParamId, ParameterPartition};
use crate::nn::{self, Gradients, TokenDistributions};
use crate::sequence::{build_mcps, PatchSequence};
use crate::signal::{split_context_target, SignalWindow};
use crate::tokenizer::{CodebookSet, TokenVector};

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub freeze: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            freeze: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(LormError::InvalidConfig("train.learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(LormError::InvalidConfig("train.batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(LormError::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch of the returned parameters.
    pub best_epoch: usize,
    pub best_val_objective: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (i, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            writeln!(out, "{},{t:?},{v:?}", i + 1).expect("string write");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Mean over channels of `-ln pi_c[y_c]`.
pub fn window_loss(dists: &TokenDistributions, y: &TokenVector) -> f64 {
    let c = dists.channels();
    dists
        .per_channel
        .iter()
        .zip(&y.tokens)
        .map(|(p, &t)| -p[t].max(PROB_FLOOR).ln())
        .sum::<f64>()
        / c as f64
}

/// A window ready for the model: its patch sequence and target tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub mcps: PatchSequence,
    pub tokens: TokenVector,
}

pub fn prepare_example(
    window: &SignalWindow,
    context_len: usize,
    patch_len: usize,
    codebooks: &CodebookSet,
) -> Result<Example> {
    let (context, target) = split_context_target(window, context_len)?;
    Ok(Example { mcps: build_mcps(context.view(), patch_len)?, tokens: codebooks.tokenize(target.view())? })
}

pub fn prepare_examples(
    windows: &[SignalWindow],
    context_len: usize,
    patch_len: usize,
    codebooks: &CodebookSet,
) -> Result<Vec<Example>> {
    windows.iter().map(|w| prepare_example(w, context_len, patch_len, codebooks)).collect()
}

/// Loss and gradient of one example for the tensors flagged in `mask`.
pub fn example_gradient(example: &Example, params: &ModelParameters, mask: &[bool]) -> Result<(f64, Gradients)> {
    let cache = nn::forward_cached(&example.mcps, params)?;
    let loss = window_loss(&cache.trace.distributions, &example.tokens);
    let dv = nn::loss_score_grad(&cache.trace.distributions, &example.tokens);
    Ok((loss, nn::backward(&cache, params, &dv, mask)))
}

/// Mean objective over a set of examples.
pub fn evaluate(examples: &[Example], params: &ModelParameters) -> Result<f64> {
    if examples.is_empty() {
        return Err(LormError::EmptyInput);
    }
    let losses = examples
        .par_iter()
        .map(|ex| nn::forward(&ex.mcps, params).map(|t| window_loss(&t.distributions, &ex.tokens)))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Adam with bias correction. Only tensors that receive a gradient are
/// touched; moment buffers are allocated lazily.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Option<Array2<f64>>>,
    v: Vec<Option<Array2<f64>>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, num_tensors: usize) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: vec![None; num_tensors],
            v: vec![None; num_tensors],
        }
    }

    pub fn step(&mut self, params: &mut ModelParameters, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        for (i, (param, grad)) in params.tensors_mut().iter_mut().zip(&grads.tensors).enumerate() {
            let Some(grad) = grad else { continue };
            let m = self.m[i].get_or_insert_with(|| Array2::zeros(grad.dim()));
            let v = self.v[i].get_or_insert_with(|| Array2::zeros(grad.dim()));
            ndarray::Zip::from(param).and(m).and(v).and(grad).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p = ((*p - update) as f32) as f64;
            });
        }
    }
}

/// Trains on prepared examples.
pub fn train_examples(
    train: &[Example],
    val: &[Example],
    params: &ModelParameters,
    partition: &ParameterPartition,
    cfg: &TrainConfig,
) -> Result<(ModelParameters, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(LormError::InsufficientSamples { needed: 1, available: 0 });
    }
    let mut params = params.clone();
    let mask = if cfg.freeze {
        partition.mask(&params.config)
    } else {
        vec![true; params.config.num_tensors()]
    };
    let mut adam = Adam::new(cfg, params.config.num_tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut report = TrainReport { best_val_objective: f64::INFINITY, ..Default::default() };
    let mut best = params.clone();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = batch
                .par_iter()
                .map(|&i| example_gradient(&train[i], &params, &mask))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = Gradients::empty(params.config.num_tensors());
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                grads.accumulate(g);
            }
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(LormError::NonFiniteLoss { epoch, step, value: batch_loss });
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut params, &grads);
            epoch_loss += batch_loss;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let val_loss = if val.is_empty() { train_loss } else { evaluate(val, &params)? };
        if !val_loss.is_finite() {
            return Err(LormError::NonFiniteLoss { epoch, step: 0, value: val_loss });
        }
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");

        if val_loss < report.best_val_objective {
            report.best_val_objective = val_loss;
            report.best_epoch = epoch;
            best = params.clone();
        }
        let stale = epoch - report.best_epoch;
        if stale >= 1 && stale >= cfg.patience {
            break;
        }
    }
    Ok((best, report))
}

/// Splits, patches and tokenises the windows, then trains.
pub fn train_model(
    train_windows: &[SignalWindow],
    val_windows: &[SignalWindow],
    context_len: usize,
    codebooks: &CodebookSet,
    params: &ModelParameters,
    partition: &ParameterPartition,
    cfg: &TrainConfig,
) -> Result<(ModelParameters, TrainReport)> {
    if train_windows.is_empty() {
        return Err(LormError::InsufficientSamples { needed: 1, available: 0 });
    }
    let h = params.config.patch_len;
    let train = prepare_examples(train_windows, context_len, h, codebooks)?;
    let val = prepare_examples(val_windows, context_len, h, codebooks)?;
    train_examples(&train, &val, params, partition, cfg)
}

/// Outcome of comparing analytic and finite-difference gradients.
#[derive(Debug, Clone)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub worst: Option<(ParamId, usize)>,
    pub checked: usize,
    pub passed: bool,
}

/// Relative-error denominator floor, keeping near-zero gradients from
/// dominating the comparison.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient of the window objective against central
/// finite differences (step `1e-5`) for every trainable scalar.
pub fn gradient_check(
    params: &ModelParameters,
    partition: &ParameterPartition,
    window: &SignalWindow,
    context_len: usize,
    codebooks: &CodebookSet,
    tolerance: f64,
) -> Result<GradientCheck> {
    const STEP: f64 = 1e-5;
    let example = prepare_example(window, context_len, params.config.patch_len, codebooks)?;
    let mask = partition.mask(&params.config);
    let (_, grads) = example_gradient(&example, params, &mask)?;
    let loss_at = |p: &ModelParameters| -> Result<f64> {
        let trace = nn::forward(&example.mcps, p)?;
        Ok(window_loss(&trace.distributions, &example.tokens))
    };

    let mut probe = params.clone();
    let mut worst = None;
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    for id in params.config.param_ids() {
        if !partition.is_trainable(id) {
            continue;
        }
        let analytic = grads.get(params, id).expect("trainable tensor has a gradient").clone();
        for (flat, &a) in analytic.iter().enumerate() {
            let idx = (flat / analytic.ncols(), flat % analytic.ncols());
            let orig = probe.get(id)[idx];
            probe.get_mut(id)[idx] = orig + STEP;
            let plus = loss_at(&probe)?;
            probe.get_mut(id)[idx] = orig - STEP;
            let minus = loss_at(&probe)?;
            probe.get_mut(id)[idx] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            checked += 1;
            if err > max_err {
                max_err = err;
                worst = Some((id, flat));
            }
        }
    }
    Ok(GradientCheck { max_relative_error: max_err, worst, checked, passed: max_err < tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dists(rows: Vec<Vec<f64>>) -> TokenDistributions {
        TokenDistributions { per_channel: rows }
    }

    #[test]
    fn loss_closed_forms() {
        let perfect = dists(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(window_loss(&perfect, &TokenVector { tokens: vec![1, 0] }), 0.0);

        let uniform = dists(vec![vec![0.1; 10]]);
        assert!((window_loss(&uniform, &TokenVector { tokens: vec![3] }) - 10f64.ln()).abs() < 1e-12);

        let mixed = dists(vec![vec![0.5, 0.5], vec![0.25, 0.75]]);
        let l = window_loss(&mixed, &TokenVector { tokens: vec![0, 0] });
        assert!((l - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
        assert!((l - 1.039721).abs() < 1e-6);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let d = dists(vec![vec![1.0, 0.0]]);
        let l = window_loss(&d, &TokenVector { tokens: vec![1] });
        assert!((l - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn report_csv_layout() {
        let r = TrainReport { train_loss: vec![1.5, 1.25], val_loss: vec![1.0, 0.5], best_epoch: 2, best_val_objective: 0.5 };
        assert_eq!(r.to_csv(), "epoch,train_loss,val_loss\n1,1.5,1.0\n2,1.25,0.5\n");
    }
}
