//! Loading, normalising and windowing multichannel sensor signals.
//!
//! Batch operations work on a fully loaded [`MultiChannelSeries`]. The
//! streaming path ([`WindowStream`]) reads one sample per line from any
//! [`BufRead`] source (a CSV file or a TCP feed) and emits exactly the windows
//! that [`segment_windows`] would produce on the same samples, independent of
//! how the bytes were chunked on the way in.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LormError, Result};

/// Default stabiliser added to the channel standard deviation.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Raw `T x C` sample matrix with channel names and sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelSeries {
    samples: Array2<f64>,
    channel_names: Vec<String>,
    sample_rate_hz: f64,
}

impl MultiChannelSeries {
    pub fn new(samples: Array2<f64>, channel_names: Vec<String>, sample_rate_hz: f64) -> Result<Self> {
        let (t, c) = samples.dim();
        if t == 0 || c == 0 {
            return Err(LormError::EmptyInput);
        }
        if channel_names.len() != c {
            return Err(LormError::ChannelMismatch { expected: c, actual: channel_names.len() });
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(LormError::InvalidConfig(format!("sample rate must be positive, got {sample_rate_hz}")));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(LormError::NonFinite("series samples".into()));
        }
        Ok(Self { samples, channel_names, sample_rate_hz })
    }

    /// Builds a series with generated channel names `ch0..chN`.
    pub fn from_samples(samples: Array2<f64>, sample_rate_hz: f64) -> Result<Self> {
        let names = (0..samples.ncols()).map(|c| format!("ch{c}")).collect();
        Self::new(samples, names, sample_rate_hz)
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.samples.ncols()
    }

    /// Rows `start..end` as a new series.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let end = end.min(self.len());
        if start >= end {
            return Err(LormError::EmptyInput);
        }
        Self::new(
            self.samples.slice(s![start..end, ..]).to_owned(),
            self.channel_names.clone(),
            self.sample_rate_hz,
        )
    }

    /// Reads the signal CSV format: a header row of channel names, then one
    /// sample per row.
    pub fn read_csv(path: impl AsRef<Path>, sample_rate_hz: f64) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let header = match lines.next() {
            Some(line) => line?,
            None => return Err(LormError::EmptyInput),
        };
        let names: Vec<String> = header.trim().split(',').map(|s| s.trim().to_string()).collect();
        let c = names.len();
        let mut flat = Vec::new();
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            parse_record(&line, c, i + 1, &mut flat)?;
            rows += 1;
        }
        if rows == 0 {
            return Err(LormError::EmptyInput);
        }
        let samples = Array2::from_shape_vec((rows, c), flat).expect("row-major buffer");
        Self::new(samples, names, sample_rate_hz)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(File::create(path)?);
        writeln!(out, "{}", self.channel_names.join(","))?;
        for row in self.samples.rows() {
            let fields: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", fields.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-channel mean and population standard deviation of a training subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub epsilon: f64,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `(x - m) / (s + eps)` applied row-wise to a `rows x C` block.
    pub fn normalize(&self, data: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if data.ncols() != self.channels() {
            return Err(LormError::ChannelMismatch { expected: self.channels(), actual: data.ncols() });
        }
        let mut out = data.to_owned();
        for (c, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, d) = (self.mean[c], self.std[c] + self.epsilon);
            col.mapv_inplace(|x| (x - m) / d);
        }
        Ok(out)
    }

    /// Inverse of [`ChannelStats::normalize`].
    pub fn denormalize(&self, data: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if data.ncols() != self.channels() {
            return Err(LormError::ChannelMismatch { expected: self.channels(), actual: data.ncols() });
        }
        let mut out = data.to_owned();
        for (c, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, d) = (self.mean[c], self.std[c] + self.epsilon);
            col.mapv_inplace(|x| x * d + m);
        }
        Ok(out)
    }
}

/// Mean and population standard deviation (divide by `T`) of each column.
pub fn compute_channel_stats(series: &MultiChannelSeries) -> Result<ChannelStats> {
    stats_of_rows(series.samples().view())
}

/// Same as [`compute_channel_stats`] over the stacked rows of several windows.
pub fn compute_window_stats(windows: &[SignalWindow]) -> Result<ChannelStats> {
    let first = windows.first().ok_or(LormError::EmptyInput)?;
    let views: Vec<_> = windows.iter().map(|w| w.data.view()).collect();
    let stacked = ndarray::concatenate(Axis(0), &views)
        .map_err(|_| LormError::ChannelMismatch { expected: first.channels(), actual: 0 })?;
    stats_of_rows(stacked.view())
}

fn stats_of_rows(data: ArrayView2<'_, f64>) -> Result<ChannelStats> {
    let t = data.nrows();
    if t == 0 || data.ncols() == 0 {
        return Err(LormError::EmptyInput);
    }
    let mut mean = Vec::with_capacity(data.ncols());
    let mut std = Vec::with_capacity(data.ncols());
    for col in data.axis_iter(Axis(1)) {
        let m = col.sum() / t as f64;
        let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / t as f64;
        mean.push(m);
        std.push(var.sqrt());
    }
    Ok(ChannelStats { mean, std, epsilon: DEFAULT_EPSILON })
}

/// Channel-wise normalisation with training statistics.
pub fn normalize_series(series: &MultiChannelSeries, stats: &ChannelStats) -> Result<MultiChannelSeries> {
    let data = stats.normalize(series.samples().view())?;
    MultiChannelSeries::new(data, series.channel_names.clone(), series.sample_rate_hz)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowingConfig {
    pub window_len: usize,
    pub context_len: usize,
    pub stride: usize,
}

impl WindowingConfig {
    /// Non-overlapping windows (`stride = window_len`).
    pub fn new(window_len: usize, context_len: usize) -> Result<Self> {
        let cfg = Self { window_len, context_len, stride: window_len };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_stride(mut self, stride: usize) -> Result<Self> {
        self.stride = stride;
        self.validate()?;
        Ok(self)
    }

    pub fn target_len(&self) -> usize {
        self.window_len - self.context_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_len == 0 || self.context_len >= self.window_len {
            return Err(LormError::InvalidConfig(format!(
                "context_len must satisfy 0 < context_len < window_len (got context_len={}, window_len={})",
                self.context_len, self.window_len
            )));
        }
        if self.stride == 0 {
            return Err(LormError::InvalidConfig("stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// A `W x C` slice of a series together with its offset in the source.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalWindow {
    pub data: Array2<f64>,
    pub start_index: usize,
}

impl SignalWindow {
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn normalized(&self, stats: &ChannelStats) -> Result<SignalWindow> {
        Ok(SignalWindow { data: stats.normalize(self.data.view())?, start_index: self.start_index })
    }
}

/// Complete windows at offsets `0, stride, 2*stride, ...`.
pub fn segment_windows(series: &MultiChannelSeries, cfg: &WindowingConfig) -> Vec<SignalWindow> {
    let t = series.len();
    if t < cfg.window_len {
        return Vec::new();
    }
    (0..=t - cfg.window_len)
        .step_by(cfg.stride)
        .map(|start| SignalWindow {
            data: series.samples().slice(s![start..start + cfg.window_len, ..]).to_owned(),
            start_index: start,
        })
        .collect()
}

/// Splits a window at row `context_len` into `(context, target)`.
pub fn split_context_target(window: &SignalWindow, context_len: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    let w = window.len();
    if context_len == 0 || context_len >= w {
        return Err(LormError::InvalidConfig(format!(
            "split index {context_len} out of range for window of length {w}"
        )));
    }
    let context = window.data.slice(s![..context_len, ..]).to_owned();
    let target = window.data.slice(s![context_len.., ..]).to_owned();
    Ok((context, target))
}

/// Random window-level split into (train, validation) index sets, each sorted
/// ascending. `train_fraction` of the windows (rounded) go to training.
pub fn split_train_val(count: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = ((count as f64) * train_fraction).round() as usize;
    let n_train = n_train.min(count);
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn parse_record(line: &str, channels: usize, index: usize, out: &mut Vec<f64>) -> Result<()> {
    let before = out.len();
    for field in line.trim().split(',') {
        match field.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => out.push(v),
            Ok(_) => {
                out.truncate(before);
                return Err(LormError::MalformedRecord { index, reason: format!("non-finite value {field:?}") });
            }
            Err(_) => {
                out.truncate(before);
                return Err(LormError::MalformedRecord { index, reason: format!("non-numeric field {field:?}") });
            }
        }
    }
    let got = out.len() - before;
    if got != channels {
        out.truncate(before);
        return Err(LormError::MalformedRecord {
            index,
            reason: format!("expected {channels} fields, got {got}"),
        });
    }
    Ok(())
}

/// Push-based windower: feed samples in time order, receive each complete
/// window as soon as its last sample arrives.
#[derive(Debug, Clone)]
pub struct Windower {
    cfg: WindowingConfig,
    channels: usize,
    buffer: VecDeque<Vec<f64>>,
    seen: usize,
}

impl Windower {
    pub fn new(cfg: WindowingConfig, channels: usize) -> Self {
        Self { cfg, channels, buffer: VecDeque::with_capacity(cfg.window_len), seen: 0 }
    }

    pub fn push(&mut self, sample: &[f64]) -> Result<Option<SignalWindow>> {
        if sample.len() != self.channels {
            return Err(LormError::ChannelMismatch { expected: self.channels, actual: sample.len() });
        }
        if self.buffer.len() == self.cfg.window_len {
            self.buffer.pop_front();
        }
        self.buffer.push_back(sample.to_vec());
        self.seen += 1;
        let w = self.cfg.window_len;
        if self.seen >= w && (self.seen - w).is_multiple_of(self.cfg.stride) {
            let mut data = Array2::zeros((w, self.channels));
            for (r, row) in self.buffer.iter().enumerate() {
                data.row_mut(r).assign(&Array1::from(row.clone()));
            }
            return Ok(Some(SignalWindow { data, start_index: self.seen - w }));
        }
        Ok(None)
    }
}

/// Iterator of windows over a line-oriented sample source.
///
/// Each line is one sample of `C` comma-separated floats. End of input ends
/// the stream; a trailing partial window is dropped. Malformed lines yield a
/// [`LormError::MalformedRecord`] carrying the 1-based record index and end
/// the stream.
pub struct WindowStream<R> {
    reader: R,
    windower: Windower,
    record: usize,
    line: String,
    done: bool,
}

impl<R: BufRead> WindowStream<R> {
    pub fn new(reader: R, cfg: WindowingConfig, channels: usize) -> Self {
        Self { reader, windower: Windower::new(cfg, channels), record: 0, line: String::new(), done: false }
    }

    /// Consumes and returns the header line (channel names) of a CSV source.
    pub fn read_header(&mut self) -> Result<Vec<String>> {
        self.line.clear();
        if self.reader.read_line(&mut self.line)? == 0 {
            return Err(LormError::EmptyInput);
        }
        Ok(self.line.trim().split(',').map(|s| s.trim().to_string()).collect())
    }
}

impl WindowStream<BufReader<File>> {
    /// Opens a signal CSV and checks its header against `channels`.
    pub fn open_csv(path: impl AsRef<Path>, cfg: WindowingConfig, channels: usize) -> Result<Self> {
        let mut stream = Self::new(BufReader::new(File::open(path)?), cfg, channels);
        let header = stream.read_header()?;
        if header.len() != channels {
            return Err(LormError::ChannelMismatch { expected: channels, actual: header.len() });
        }
        Ok(stream)
    }
}

impl WindowStream<BufReader<TcpStream>> {
    /// Connects to a line-oriented TCP sample feed (no header).
    pub fn connect(addr: &str, cfg: WindowingConfig, channels: usize) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        Ok(Self::new(BufReader::new(stream), cfg, channels))
    }
}

impl<R: BufRead> Iterator for WindowStream<R> {
    type Item = Result<SignalWindow>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut sample = Vec::with_capacity(self.windower.channels);
        while !self.done {
            self.line.clear();
            match self.reader.read_line(&mut self.line) {
                Ok(0) => {
                    self.done = true;
                    return None;
                }
                Ok(_) => {}
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
            }
            if self.line.trim().is_empty() {
                continue;
            }
            self.record += 1;
            sample.clear();
            if let Err(e) = parse_record(&self.line, self.windower.channels, self.record, &mut sample) {
                self.done = true;
                return Some(Err(e));
            }
            match self.windower.push(&sample) {
                Ok(Some(w)) => return Some(Ok(w)),
                Ok(None) => {}
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn series(data: Array2<f64>) -> MultiChannelSeries {
        MultiChannelSeries::from_samples(data, 1000.0).unwrap()
    }

    #[test]
    fn stats_of_simple_columns() {
        let s = series(array![[5.0, 0.0, 1.0], [5.0, 0.0, 2.0], [5.0, 0.0, 3.0]]);
        let st = compute_channel_stats(&s).unwrap();
        assert_eq!(st.mean, vec![5.0, 0.0, 2.0]);
        assert_eq!(st.std[0], 0.0);
        assert_eq!(st.std[1], 0.0);
        assert!((st.std[2] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((st.std[2] - 0.81650).abs() < 1e-5);
    }

    #[test]
    fn empty_series_is_rejected() {
        let err = MultiChannelSeries::from_samples(Array2::zeros((0, 2)), 1.0).unwrap_err();
        assert_eq!(err.to_string(), "empty input");
        assert!(matches!(compute_window_stats(&[]), Err(LormError::EmptyInput)));
    }

    #[test]
    fn normalize_constant_and_identity() {
        let s = series(array![[2.0, 3.0], [2.0, -1.0]]);
        let stats = ChannelStats { mean: vec![2.0, 0.0], std: vec![0.0, 1.0], epsilon: 1e-8 };
        let n = normalize_series(&s, &stats).unwrap();
        assert_eq!(n.samples().column(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(n.samples()[[0, 1]], 3.0 / (1.0 + 1e-8));
        assert_eq!(n.samples()[[1, 1]], -1.0 / (1.0 + 1e-8));
        assert_eq!(n.channel_names(), s.channel_names());
    }

    #[test]
    fn normalize_rejects_channel_mismatch() {
        let s = series(array![[1.0, 2.0]]);
        let stats = ChannelStats { mean: vec![0.0], std: vec![1.0], epsilon: 1e-8 };
        assert!(matches!(normalize_series(&s, &stats), Err(LormError::ChannelMismatch { .. })));
    }

    #[test]
    fn segment_examples() {
        let s = series(Array2::from_shape_fn((963, 2), |(t, c)| (t * 2 + c) as f64));
        let cfg = WindowingConfig::new(321, 320).unwrap();
        let ws = segment_windows(&s, &cfg);
        assert_eq!(ws.iter().map(|w| w.start_index).collect::<Vec<_>>(), vec![0, 321, 642]);

        let short = series(Array2::zeros((320, 1)));
        assert!(segment_windows(&short, &cfg).is_empty());

        let s10 = series(Array2::zeros((10, 1)));
        let cfg = WindowingConfig::new(3, 1).unwrap().with_stride(2).unwrap();
        let starts: Vec<_> = segment_windows(&s10, &cfg).iter().map(|w| w.start_index).collect();
        assert_eq!(starts, vec![0, 2, 4, 6]);
    }

    #[test]
    fn split_examples() {
        let w = SignalWindow { data: array![[1.0], [2.0], [3.0], [4.0]], start_index: 0 };
        let (ctx, tgt) = split_context_target(&w, 2).unwrap();
        assert_eq!(ctx, array![[1.0], [2.0]]);
        assert_eq!(tgt, array![[3.0], [4.0]]);
        assert!(split_context_target(&w, 0).is_err());
        assert!(split_context_target(&w, 4).is_err());

        let big = SignalWindow { data: Array2::zeros((321, 3)), start_index: 0 };
        let (ctx, tgt) = split_context_target(&big, 320).unwrap();
        assert_eq!(ctx.dim(), (320, 3));
        assert_eq!(tgt.dim(), (1, 3));
    }

    #[test]
    fn windowing_config_validation() {
        assert!(WindowingConfig::new(321, 321).is_err());
        assert!(WindowingConfig::new(321, 0).is_err());
        assert!(WindowingConfig::new(321, 320).unwrap().with_stride(0).is_err());
    }

    #[test]
    fn stream_reports_malformed_records() {
        let cfg = WindowingConfig::new(2, 1).unwrap();
        let text = "1,2\n3,4\n5,x\n";
        let mut stream = WindowStream::new(text.as_bytes(), cfg, 2);
        assert!(stream.next().unwrap().is_ok());
        match stream.next().unwrap() {
            Err(LormError::MalformedRecord { index, .. }) => assert_eq!(index, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(stream.next().is_none());

        let mut wrong_width = WindowStream::new("1,2,3\n".as_bytes(), cfg, 2);
        assert!(matches!(wrong_width.next(), Some(Err(LormError::MalformedRecord { index: 1, .. }))));
    }

    #[test]
    fn stream_drops_partial_tail() {
        let cfg = WindowingConfig::new(3, 2).unwrap();
        let text: String = (0..8).map(|i| format!("{i}\n")).collect();
        let ws: Vec<_> = WindowStream::new(text.as_bytes(), cfg, 1).map(|w| w.unwrap()).collect();
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[1].data.column(0).to_vec(), vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn train_val_split_partitions_indices() {
        let (tr, va) = split_train_val(10, 0.8, 7);
        assert_eq!(tr.len(), 8);
        assert_eq!(va.len(), 2);
        let mut all: Vec<_> = tr.iter().chain(va.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_train_val(10, 0.8, 7), (tr, va));
    }
}
