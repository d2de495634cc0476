//! End-to-end workflow shared by the command line and the examples:
//! windowing and normalisation, codebook fitting, the two training phases,
//! monitoring and evaluation.

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{LormError, Result};
use crate::model::{init_model, partition_parameters, ModelParameters, ParameterPartition};
use crate::monitor::{monitor_windows, HealthRecord, MonitorConfig, WindowScorer};
use crate::signal::{
    compute_window_stats, segment_windows, split_train_val, ChannelStats, MultiChannelSeries, SignalWindow,
    WindowingConfig,
};
use crate::synth::generate_run;
use crate::tokenizer::{fit_codebooks, CodebookSet};
use crate::train::{train_model, TrainConfig, TrainReport};

/// Normalised train/validation windows of one series.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<SignalWindow>,
    pub val: Vec<SignalWindow>,
    /// Statistics of the raw training windows.
    pub stats: ChannelStats,
    pub windowing: WindowingConfig,
    pub channel_names: Vec<String>,
}

/// Segments `series`, splits windows at random into train/validation, and
/// normalises both with statistics of the training windows only.
pub fn prepare_dataset(
    series: &MultiChannelSeries,
    windowing: WindowingConfig,
    train_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    let windows = segment_windows(series, &windowing);
    if windows.is_empty() {
        return Err(LormError::InsufficientSamples { needed: windowing.window_len, available: series.len() });
    }
    let (train_idx, val_idx) = split_train_val(windows.len(), train_fraction, seed);
    let raw_train: Vec<SignalWindow> = train_idx.iter().map(|&i| windows[i].clone()).collect();
    if raw_train.is_empty() {
        return Err(LormError::InsufficientSamples { needed: 1, available: 0 });
    }
    let stats = compute_window_stats(&raw_train)?;
    let train = raw_train.iter().map(|w| w.normalized(&stats)).collect::<Result<_>>()?;
    let val = val_idx.iter().map(|&i| windows[i].normalized(&stats)).collect::<Result<_>>()?;
    Ok(Dataset { train, val, stats, windowing, channel_names: series.channel_names().to_vec() })
}

pub fn fit_dataset_codebooks(ds: &Dataset, k: usize, seed: u64) -> Result<CodebookSet> {
    fit_codebooks(&ds.train, ds.windowing.context_len, k, seed, &ds.channel_names)
}

/// A trained model with everything needed to score windows, plus the
/// frozen-block hashes taken before and after the phase.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub checkpoint: Checkpoint,
    pub codebooks: CodebookSet,
    pub report: TrainReport,
    pub partition: ParameterPartition,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
}

/// Trains `init` on `ds` and packages the result as a checkpoint.
pub fn train_phase(
    ds: &Dataset,
    codebooks: CodebookSet,
    init: &ModelParameters,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let partition = partition_parameters(init);
    let frozen_hash_before = init.hash_of(&partition.frozen);
    let (params, report) =
        train_model(&ds.train, &ds.val, ds.windowing.context_len, &codebooks, init, &partition, cfg)?;
    let frozen_hash_after = params.hash_of(&partition.frozen);
    let checkpoint = Checkpoint {
        params,
        windowing: ds.windowing,
        stats: ds.stats.clone(),
        codebook_hash: codebooks.content_hash(),
    };
    Ok(TrainedModel { checkpoint, codebooks, report, partition, frozen_hash_before, frozen_hash_after })
}

/// Full-parameter training from a fresh initialisation on the synthetic
/// pretraining corpus.
pub fn pretrain(cfg: &RunConfig) -> Result<TrainedModel> {
    let corpus = generate_run(&cfg.pretrain.corpus)?;
    let ds = prepare_dataset(&corpus.series, cfg.windowing()?, cfg.windowing.train_fraction, cfg.seed)?;
    let codebooks = fit_dataset_codebooks(&ds, cfg.tokenizer.k, cfg.seed)?;
    let init = init_model(&cfg.backbone(corpus.series.channels())?, cfg.seed)?;
    let train = TrainConfig { freeze: false, ..cfg.pretrain.train.clone() };
    log::info!("pretraining on {} windows ({} validation)", ds.train.len(), ds.val.len());
    train_phase(&ds, codebooks, &init, &train)
}

/// Partial fine-tuning on `series`. Starts from `init` when given (its shape
/// must match the configured backbone), otherwise from a fresh
/// initialisation.
pub fn finetune(
    cfg: &RunConfig,
    series: &MultiChannelSeries,
    codebooks: CodebookSet,
    init: Option<&ModelParameters>,
) -> Result<TrainedModel> {
    let windowing = cfg.windowing()?;
    let backbone = cfg.backbone(series.channels())?;
    if codebooks.channels() != series.channels() {
        return Err(LormError::ChannelMismatch { expected: series.channels(), actual: codebooks.channels() });
    }
    let init = match init {
        Some(p) if p.config != backbone => {
            return Err(LormError::InvalidConfig(
                "initial checkpoint does not match the configured model (check model.*, patch.patch_len, tokenizer.k and channel count)"
                    .into(),
            ))
        }
        Some(p) => p.clone(),
        None => init_model(&backbone, cfg.seed)?,
    };
    let ds = prepare_dataset(series, windowing, cfg.windowing.train_fraction, cfg.seed)?;
    log::info!("fine-tuning on {} windows ({} validation)", ds.train.len(), ds.val.len());
    train_phase(&ds, codebooks, &init, &cfg.train)
}

/// Codebooks for `series` under the configured windowing and split.
pub fn fit_series_codebooks(cfg: &RunConfig, series: &MultiChannelSeries) -> Result<CodebookSet> {
    let ds = prepare_dataset(series, cfg.windowing()?, cfg.windowing.train_fraction, cfg.seed)?;
    fit_dataset_codebooks(&ds, cfg.tokenizer.k, cfg.seed)
}

/// Scores every complete window of `series` in stream order.
pub fn monitor_series(series: &MultiChannelSeries, scorer: &WindowScorer, cfg: MonitorConfig) -> Result<Vec<HealthRecord>> {
    let windowing = scorer.checkpoint().windowing;
    monitor_windows(segment_windows(series, &windowing).into_iter().map(Ok), scorer, cfg)
}
