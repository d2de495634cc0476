//! Online condition monitoring.
//!
//! Every incoming window is normalised with the training statistics, scored
//! by the window-level token cross-entropy (WLF), and compared against the
//! mean WLF of the first `buffer_len` windows. The difference is the health
//! index (HI); an alarm fires when HI strictly exceeds the threshold.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{LormError, Result};
use crate::eval::WearTable;
use crate::nn::{self, TokenDistributions};
use crate::signal::SignalWindow;
use crate::tokenizer::CodebookSet;
use crate::train::{prepare_example, window_loss};

/// Baseline length used on real machining streams.
pub const DEFAULT_BUFFER_LEN: usize = 20_000;
pub const DEFAULT_THRESHOLD: f64 = 0.20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    pub buffer_len: usize,
    pub threshold: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self { buffer_len: DEFAULT_BUFFER_LEN, threshold: DEFAULT_THRESHOLD }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buffer_len == 0 {
            return Err(LormError::InvalidConfig("monitor.buffer_len must be at least 1".into()));
        }
        if !self.threshold.is_finite() {
            return Err(LormError::InvalidConfig("monitor.threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Per-window monitoring output. `window_index` is 1-based; `hi` is absent
/// while the baseline is still being collected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthRecord {
    pub window_index: usize,
    pub wlf: f64,
    pub hi: Option<f64>,
    pub alarm: bool,
}

/// First `buffer_len` WLF values and their mean once complete.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineBuffer {
    pub values: Vec<f64>,
    capacity: usize,
    mean: Option<f64>,
}

impl BaselineBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { values: Vec::with_capacity(capacity.min(1 << 16)), capacity, mean: None }
    }

    pub fn is_full(&self) -> bool {
        self.values.len() == self.capacity
    }

    pub fn mean(&self) -> Option<f64> {
        self.mean
    }

    fn push(&mut self, wlf: f64) {
        self.values.push(wlf);
        if self.is_full() {
            self.mean = Some(self.values.iter().sum::<f64>() / self.capacity as f64);
        }
    }
}

/// Single-writer HI tracker for one stream.
#[derive(Debug, Clone)]
pub struct HealthTracker {
    cfg: MonitorConfig,
    baseline: BaselineBuffer,
    seen: usize,
}

impl HealthTracker {
    pub fn new(cfg: MonitorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, baseline: BaselineBuffer::new(cfg.buffer_len), seen: 0 })
    }

    pub fn baseline(&self) -> &BaselineBuffer {
        &self.baseline
    }

    pub fn update(&mut self, wlf: f64) -> HealthRecord {
        self.seen += 1;
        let hi = match self.baseline.mean() {
            Some(mean) => Some(wlf - mean),
            None => {
                self.baseline.push(wlf);
                None
            }
        };
        HealthRecord { window_index: self.seen, wlf, hi, alarm: hi.is_some_and(|h| h > self.cfg.threshold) }
    }
}

/// `update_health_index` as a free function.
pub fn update_health_index(tracker: &mut HealthTracker, wlf: f64) -> HealthRecord {
    tracker.update(wlf)
}

/// Scores raw windows with a trained checkpoint and its codebooks.
#[derive(Debug, Clone)]
pub struct WindowScorer {
    checkpoint: Checkpoint,
    codebooks: CodebookSet,
}

impl WindowScorer {
    pub fn new(checkpoint: Checkpoint, codebooks: CodebookSet) -> Result<Self> {
        checkpoint.check_codebooks(&codebooks)?;
        Ok(Self { checkpoint, codebooks })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn channels(&self) -> usize {
        self.checkpoint.params.config.channels
    }

    /// Token distributions and true tokens for a raw (unnormalised) window.
    pub fn predict(&self, raw: &SignalWindow) -> Result<(TokenDistributions, crate::tokenizer::TokenVector)> {
        let ck = &self.checkpoint;
        if raw.channels() != self.channels() {
            return Err(LormError::ChannelMismatch { expected: self.channels(), actual: raw.channels() });
        }
        if raw.len() != ck.windowing.window_len {
            return Err(LormError::DimensionMismatch { expected: ck.windowing.window_len, actual: raw.len() });
        }
        let window = raw.normalized(&ck.stats)?;
        let example = prepare_example(&window, ck.windowing.context_len, ck.params.config.patch_len, &self.codebooks)?;
        let trace = nn::forward(&example.mcps, &ck.params)?;
        Ok((trace.distributions, example.tokens))
    }

    /// Window-level prediction score (WLF).
    pub fn score(&self, raw: &SignalWindow) -> Result<f64> {
        let (dists, tokens) = self.predict(raw)?;
        Ok(window_loss(&dists, &tokens))
    }
}

pub fn score_window(raw: &SignalWindow, scorer: &WindowScorer) -> Result<f64> {
    scorer.score(raw)
}

/// Scores every window of a stream in order and tracks HI.
pub fn monitor_windows<I>(windows: I, scorer: &WindowScorer, cfg: MonitorConfig) -> Result<Vec<HealthRecord>>
where
    I: IntoIterator<Item = Result<SignalWindow>>,
{
    let mut tracker = HealthTracker::new(cfg)?;
    let mut records = Vec::new();
    for w in windows {
        let wlf = scorer.score(&w?)?;
        records.push(tracker.update(wlf));
    }
    Ok(records)
}

/// Like [`monitor_windows`], but ingestion runs on its own thread and hands
/// windows to the scoring thread through a FIFO channel. `on_record` sees
/// each record as soon as it is produced.
pub fn monitor_threaded<I>(
    windows: I,
    scorer: &WindowScorer,
    cfg: MonitorConfig,
    mut on_record: impl FnMut(&HealthRecord),
) -> Result<Vec<HealthRecord>>
where
    I: IntoIterator<Item = Result<SignalWindow>> + Send,
    I::IntoIter: Send,
{
    let mut tracker = HealthTracker::new(cfg)?;
    let (tx, rx) = mpsc::sync_channel::<Result<SignalWindow>>(64);
    thread::scope(|scope| {
        scope.spawn(move || {
            for w in windows {
                let stop = w.is_err();
                if tx.send(w).is_err() || stop {
                    break;
                }
            }
        });
        let mut records = Vec::new();
        for w in rx {
            let wlf = scorer.score(&w?)?;
            let rec = tracker.update(wlf);
            on_record(&rec);
            records.push(rec);
        }
        Ok(records)
    })
}

/// Formats an alarm event line.
pub fn alarm_line(record: &HealthRecord, tau: f64) -> String {
    format!("ALARM window={} hi={} tau={}", record.window_index, record.hi.unwrap_or(f64::NAN), tau)
}

/// HI CSV: `window_index,wlf,hi,alarm[,cut_id][,hi_ma]`. `hi` is empty during
/// the baseline buffer. `hi_ma` is a trailing moving average of the defined
/// HI values, for plotting only.
pub fn hi_csv(records: &[HealthRecord], wear: Option<&WearTable>, moving_average: Option<usize>) -> String {
    let mut out = String::from("window_index,wlf,hi,alarm");
    if wear.is_some() {
        out.push_str(",cut_id");
    }
    if moving_average.is_some() {
        out.push_str(",hi_ma");
    }
    out.push('\n');
    let mut recent: std::collections::VecDeque<f64> = Default::default();
    for r in records {
        let hi = r.hi.map(|h| format!("{h:?}")).unwrap_or_default();
        write!(out, "{},{:?},{},{}", r.window_index, r.wlf, hi, u8::from(r.alarm)).expect("string write");
        if let Some(table) = wear {
            let cut = table.cut_of(r.window_index).map(|c| c.cut_id.to_string()).unwrap_or_default();
            write!(out, ",{cut}").expect("string write");
        }
        if let Some(len) = moving_average {
            let ma = match r.hi {
                Some(h) => {
                    recent.push_back(h);
                    if recent.len() > len.max(1) {
                        recent.pop_front();
                    }
                    format!("{:?}", recent.iter().sum::<f64>() / recent.len() as f64)
                }
                None => String::new(),
            };
            write!(out, ",{ma}").expect("string write");
        }
        out.push('\n');
    }
    out
}

pub fn write_hi_csv(path: impl AsRef<Path>, records: &[HealthRecord], wear: Option<&WearTable>) -> Result<()> {
    fs::write(path, hi_csv(records, wear, None))?;
    Ok(())
}

/// Parses the first four columns of an HI CSV.
pub fn parse_hi_csv(text: &str) -> Result<Vec<HealthRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = |reason: &str| LormError::MalformedRecord { index: i + 1, reason: reason.to_string() };
        if f.len() < 4 {
            return Err(bad("expected at least window_index,wlf,hi,alarm"));
        }
        out.push(HealthRecord {
            window_index: f[0].trim().parse().map_err(|_| bad("window_index"))?,
            wlf: f[1].trim().parse().map_err(|_| bad("wlf"))?,
            hi: match f[2].trim() {
                "" => None,
                s => Some(s.parse().map_err(|_| bad("hi"))?),
            },
            alarm: match f[3].trim() {
                "0" => false,
                "1" => true,
                _ => return Err(bad("alarm")),
            },
        });
    }
    Ok(out)
}

pub fn read_hi_csv(path: impl AsRef<Path>) -> Result<Vec<HealthRecord>> {
    parse_hi_csv(&fs::read_to_string(path)?)
}

/// Result of threshold calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub cut_id: usize,
    pub wear_um: f64,
    pub tau: f64,
    pub windows: usize,
}

/// Picks the cut whose wear is closest to `wear_limit_um` (earliest on ties)
/// among cuts with at least one defined HI, and returns the mean HI over
/// that cut's windows as the threshold.
pub fn calibrate_threshold(
    hi_by_cut: &BTreeMap<usize, Vec<f64>>,
    wear: &WearTable,
    wear_limit_um: f64,
) -> Result<Calibration> {
    let mut best: Option<(&crate::eval::CutWear, &Vec<f64>)> = None;
    for cut in &wear.cuts {
        let Some(his) = hi_by_cut.get(&cut.cut_id).filter(|v| !v.is_empty()) else { continue };
        let closer = match best {
            None => true,
            Some((b, _)) => (cut.wear_um - wear_limit_um).abs() < (b.wear_um - wear_limit_um).abs(),
        };
        if closer {
            best = Some((cut, his));
        }
    }
    let (cut, his) = best.ok_or_else(|| LormError::Missing("no cut with a defined health index".into()))?;
    Ok(Calibration {
        cut_id: cut.cut_id,
        wear_um: cut.wear_um,
        tau: his.iter().sum::<f64>() / his.len() as f64,
        windows: his.len(),
    })
}

/// Groups the defined HI values of a record stream by cut.
pub fn hi_by_cut(records: &[HealthRecord], wear: &WearTable) -> BTreeMap<usize, Vec<f64>> {
    let mut map: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        if let (Some(hi), Some(cut)) = (r.hi, wear.cut_of(r.window_index)) {
            map.entry(cut.cut_id).or_default().push(hi);
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::CutWear;

    fn tracker(buffer_len: usize, threshold: f64) -> HealthTracker {
        HealthTracker::new(MonitorConfig { buffer_len, threshold }).unwrap()
    }

    #[test]
    fn hi_after_buffer() {
        let mut t = tracker(3, 0.2);
        let recs: Vec<_> = [1.0, 1.0, 1.0, 1.5].iter().map(|&w| t.update(w)).collect();
        assert!(recs[..3].iter().all(|r| r.hi.is_none() && !r.alarm));
        assert_eq!(recs[3].hi, Some(0.5));
        assert_eq!(recs[3].window_index, 4);
        assert!(recs[3].alarm);
    }

    #[test]
    fn constant_stream_never_alarms() {
        let mut t = tracker(5, 0.0);
        for _ in 0..50 {
            let r = t.update(std::f64::consts::LN_10);
            assert!(!r.alarm);
            if let Some(h) = r.hi {
                assert_eq!(h, 0.0);
            }
        }
    }

    #[test]
    fn alarm_is_strict() {
        let mut t = tracker(1, 0.20);
        t.update(0.0);
        assert!(!t.update(0.20).alarm);
        assert!(t.update(0.21).alarm);
    }

    #[test]
    fn zero_buffer_is_rejected() {
        assert!(HealthTracker::new(MonitorConfig { buffer_len: 0, threshold: 0.2 }).is_err());
    }

    fn wear(cuts: &[(usize, f64)]) -> WearTable {
        WearTable {
            cuts: cuts
                .iter()
                .enumerate()
                .map(|(i, &(id, w))| CutWear { cut_id: id, wear_um: w, first_window: 2 * i + 1, last_window: 2 * i + 2 })
                .collect(),
        }
    }

    #[test]
    fn calibration_picks_closest_cut() {
        let table = wear(&[(27, 290.0), (28, 301.21), (29, 335.18)]);
        let his = BTreeMap::from([(27, vec![0.1]), (28, vec![0.1, 0.3]), (29, vec![0.9])]);
        let cal = calibrate_threshold(&his, &table, 300.0).unwrap();
        assert_eq!(cal.cut_id, 28);
        assert!((cal.tau - 0.2).abs() < 1e-15);

        let single = wear(&[(4, 100.0)]);
        let cal = calibrate_threshold(&BTreeMap::from([(4, vec![0.5])]), &single, 300.0).unwrap();
        assert_eq!(cal.cut_id, 4);

        let tie = wear(&[(1, 290.0), (2, 310.0)]);
        let his = BTreeMap::from([(1, vec![0.0]), (2, vec![1.0])]);
        assert_eq!(calibrate_threshold(&his, &tie, 300.0).unwrap().cut_id, 1);

        assert!(calibrate_threshold(&BTreeMap::new(), &table, 300.0).is_err());
    }

    #[test]
    fn hi_csv_round_trip() {
        let mut t = tracker(2, 0.1);
        let recs: Vec<_> = [0.5, 0.7, 0.6, 0.9].iter().map(|&w| t.update(w)).collect();
        let table = wear(&[(1, 150.0), (2, 320.0)]);
        let text = hi_csv(&recs, Some(&table), Some(2));
        assert!(text.starts_with("window_index,wlf,hi,alarm,cut_id,hi_ma\n1,0.5,,0,1,\n"));
        assert_eq!(parse_hi_csv(&text).unwrap(), recs);
        assert_eq!(alarm_line(&recs[3], 0.1), format!("ALARM window=4 hi={} tau=0.1", recs[3].hi.unwrap()));
    }
}
