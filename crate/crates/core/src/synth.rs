//! Deterministic synthetic rotating-machinery signals with an injectable
//! degradation profile and a ground-truth wear curve.
//!
//! Each channel is a sum of harmonics plus Gaussian noise. After
//! `degradation_onset` the designated fault harmonic of `fault_channel` grows
//! linearly and a sideband appears next to it, both scaled by
//! `(t - onset) * degradation_rate`. The run is divided into equal pseudo
//! ring cuts; wear rises from 150 um to 400 um with degradation progress.

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LormError, Result};
use crate::eval::{CutWear, WearTable};
use crate::signal::{MultiChannelSeries, WindowingConfig};

pub const WEAR_START_UM: f64 = 150.0;
pub const WEAR_END_UM: f64 = 400.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub frequency_hz: f64,
    pub amplitude: f64,
    pub phase: f64,
}

impl Harmonic {
    pub fn new(frequency_hz: f64, amplitude: f64, phase: f64) -> Self {
        Self { frequency_hz, amplitude, phase }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub channels: usize,
    pub sample_rate_hz: f64,
    pub duration_samples: usize,
    /// One harmonic set per channel.
    pub harmonics: Vec<Vec<Harmonic>>,
    pub noise_sigma: f64,
    /// Sample index where degradation starts.
    pub degradation_onset: usize,
    /// Growth of the fault components per sample after onset.
    pub degradation_rate: f64,
    pub fault_channel: usize,
    /// Index into the fault channel's harmonic set.
    pub fault_harmonic: usize,
    pub sideband_offset_hz: f64,
    pub cuts: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            sample_rate_hz: 10_000.0,
            duration_samples: 200_000,
            harmonics: vec![
                vec![Harmonic::new(200.0, 1.0, 0.0), Harmonic::new(600.0, 0.4, 0.5)],
                vec![Harmonic::new(200.0, 0.8, 1.0), Harmonic::new(400.0, 0.5, 0.2)],
                vec![Harmonic::new(250.0, 1.0, 2.0), Harmonic::new(750.0, 0.3, 0.0)],
            ],
            noise_sigma: 0.05,
            degradation_onset: 120_000,
            degradation_rate: 0.0,
            fault_channel: 0,
            fault_harmonic: 0,
            sideband_offset_hz: 60.0,
            cuts: 40,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LormError::InvalidConfig(m.to_string()));
        if self.channels == 0 || self.duration_samples == 0 {
            return bad("synth needs at least one channel and one sample");
        }
        if self.harmonics.len() != self.channels {
            return bad("synth.harmonics must have one entry per channel");
        }
        if self.sample_rate_hz.is_nan() || self.sample_rate_hz <= 0.0 {
            return bad("synth.sample_rate_hz must be positive");
        }
        if self.degradation_onset > self.duration_samples {
            return bad("synth.degradation_onset must not exceed duration_samples");
        }
        if self.degradation_rate.is_nan() || self.degradation_rate < 0.0 || self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return bad("synth.degradation_rate and noise_sigma must be non-negative");
        }
        if self.cuts == 0 || self.cuts > self.duration_samples {
            return bad("synth.cuts must be between 1 and duration_samples");
        }
        if self.fault_channel >= self.channels || self.fault_harmonic >= self.harmonics[self.fault_channel].len() {
            return bad("synth fault channel/harmonic out of range");
        }
        Ok(())
    }
}

/// A generated run: the signal plus its ground-truth wear per cut.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRun {
    pub series: MultiChannelSeries,
    /// `[start, end)` sample range of each cut.
    pub cut_bounds: Vec<(usize, usize)>,
    /// Wear in um per cut, non-decreasing.
    pub wear_um: Vec<f64>,
    pub degradation_onset: usize,
}

impl SynthRun {
    /// Maps 1-based window indices to cuts: a window belongs to the cut that
    /// contains its first sample. Cuts that start no window are omitted.
    pub fn wear_table(&self, windowing: &WindowingConfig) -> WearTable {
        let t = self.series.len();
        let starts: Vec<usize> = if t >= windowing.window_len {
            (0..=t - windowing.window_len).step_by(windowing.stride).collect()
        } else {
            Vec::new()
        };
        let mut cuts = Vec::new();
        for (cut, &(lo, hi)) in self.cut_bounds.iter().enumerate() {
            let inside: Vec<usize> = starts
                .iter()
                .enumerate()
                .filter(|(_, &s)| s >= lo && s < hi)
                .map(|(i, _)| i + 1)
                .collect();
            if let (Some(&first), Some(&last)) = (inside.first(), inside.last()) {
                cuts.push(CutWear { cut_id: cut + 1, wear_um: self.wear_um[cut], first_window: first, last_window: last });
            }
        }
        WearTable { cuts }
    }

    /// 1-based index of the first window whose start lies at or after onset.
    pub fn onset_window(&self, windowing: &WindowingConfig) -> usize {
        self.degradation_onset.div_ceil(windowing.stride) + 1
    }
}

/// Generates a run. Identical configs give identical bytes.
pub fn generate_run(cfg: &SynthConfig) -> Result<SynthRun> {
    cfg.validate()?;
    let t_len = cfg.duration_samples;
    let fs = cfg.sample_rate_hz;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("valid sigma");
    let fault = cfg.harmonics[cfg.fault_channel][cfg.fault_harmonic];

    let mut samples = Array2::zeros((t_len, cfg.channels));
    for t in 0..t_len {
        let time = t as f64 / fs;
        let growth = if t >= cfg.degradation_onset { (t - cfg.degradation_onset) as f64 * cfg.degradation_rate } else { 0.0 };
        for c in 0..cfg.channels {
            let mut x: f64 = cfg.harmonics[c]
                .iter()
                .map(|h| h.amplitude * (TAU * h.frequency_hz * time + h.phase).sin())
                .sum();
            if c == cfg.fault_channel && growth > 0.0 {
                x += growth * fault.amplitude * (TAU * fault.frequency_hz * time + fault.phase).sin();
                x += growth * fault.amplitude * (TAU * (fault.frequency_hz + cfg.sideband_offset_hz) * time).sin();
            }
            if cfg.noise_sigma > 0.0 {
                x += noise.sample(&mut rng);
            }
            samples[[t, c]] = x;
        }
    }
    let names = (0..cfg.channels).map(|c| format!("sensor{c}")).collect();
    let series = MultiChannelSeries::new(samples, names, fs)?;

    let cut_bounds: Vec<(usize, usize)> =
        (0..cfg.cuts).map(|j| (j * t_len / cfg.cuts, (j + 1) * t_len / cfg.cuts)).collect();
    let span = (t_len - cfg.degradation_onset).max(1) as f64;
    let wear_um = cut_bounds
        .iter()
        .map(|&(_, end)| {
            let progress = if cfg.degradation_rate > 0.0 {
                (end.saturating_sub(cfg.degradation_onset) as f64 / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
            WEAR_START_UM + (WEAR_END_UM - WEAR_START_UM) * progress
        })
        .collect();
    Ok(SynthRun { series, cut_bounds, wear_um, degradation_onset: cfg.degradation_onset })
}
