//! Window labelling from wear tables, classification metrics and the
//! detection deviation of the first alarm.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LormError, Result};
use crate::monitor::HealthRecord;

/// ISO flank-wear limit in micrometres.
pub const ISO_WEAR_LIMIT_UM: f64 = 300.0;

/// Measured wear of one cut and the (1-based, inclusive) window range it spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutWear {
    pub cut_id: usize,
    pub wear_um: f64,
    pub first_window: usize,
    pub last_window: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WearTable {
    pub cuts: Vec<CutWear>,
}

impl WearTable {
    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.cuts.iter().enumerate() {
            if c.wear_um.is_nan() || c.wear_um < 0.0 {
                return Err(LormError::InvalidConfig(format!("cut {} has negative wear", c.cut_id)));
            }
            if c.first_window > c.last_window {
                return Err(LormError::InvalidConfig(format!("cut {} has an empty window range", c.cut_id)));
            }
            if i > 0 && c.first_window <= self.cuts[i - 1].last_window {
                return Err(LormError::InvalidConfig(format!("cut {} overlaps the previous cut", c.cut_id)));
            }
        }
        Ok(())
    }

    pub fn cut_of(&self, window_index: usize) -> Option<&CutWear> {
        let i = self.cuts.partition_point(|c| c.last_window < window_index);
        self.cuts.get(i).filter(|c| c.first_window <= window_index)
    }

    pub fn wear_of(&self, window_index: usize) -> Result<f64> {
        self.cut_of(window_index)
            .map(|c| c.wear_um)
            .ok_or_else(|| LormError::Missing(format!("window {window_index} is not covered by any cut")))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("cut_id,wear_um,first_window,last_window\n");
        for c in &self.cuts {
            writeln!(out, "{},{:?},{},{}", c.cut_id, c.wear_um, c.first_window, c.last_window).expect("string write");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut cuts = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |reason: &str| LormError::MalformedRecord { index: i + 1, reason: reason.to_string() };
            if f.len() != 4 {
                return Err(bad("expected cut_id,wear_um,first_window,last_window"));
            }
            cuts.push(CutWear {
                cut_id: f[0].parse().map_err(|_| bad("cut_id"))?,
                wear_um: f[1].parse().map_err(|_| bad("wear_um"))?,
                first_window: f[2].parse().map_err(|_| bad("first_window"))?,
                last_window: f[3].parse().map_err(|_| bad("last_window"))?,
            });
        }
        let table = Self { cuts };
        table.validate()?;
        Ok(table)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }
}

/// `true` (abnormal) when the window's cut wear strictly exceeds `limit_um`.
pub fn label_windows(wear: &WearTable, windows: &[usize], limit_um: f64) -> Result<Vec<bool>> {
    windows.iter().map(|&w| wear.wear_of(w).map(|x| x > limit_um)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_pairs(predictions: &[bool], labels: &[bool]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(LormError::DimensionMismatch { expected: labels.len(), actual: predictions.len() });
        }
        let mut c = Self::default();
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Accuracy, precision, recall, F1 and false-positive rate. A metric whose
/// denominator is zero is reported as 0 and named in `undefined`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub fpr: f64,
    pub counts: ConfusionCounts,
    pub undefined: Vec<String>,
}

fn ratio(num: f64, den: f64, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0.0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num / den
    }
}

impl MetricReport {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let (tp, tn, fp, fn_) = (counts.tp as f64, counts.tn as f64, counts.fp as f64, counts.fn_ as f64);
        let mut undefined = Vec::new();
        let acc = ratio(tp + tn, tp + tn + fp + fn_, "acc", &mut undefined);
        let p = ratio(tp, tp + fp, "p", &mut undefined);
        let r = ratio(tp, tp + fn_, "r", &mut undefined);
        let f1 = ratio(2.0 * p * r, p + r, "f1", &mut undefined);
        let fpr = ratio(fp, fp + tn, "fpr", &mut undefined);
        Self { acc, p, r, f1, fpr, counts, undefined }
    }

    pub fn is_defined(&self, metric: &str) -> bool {
        !self.undefined.iter().any(|m| m == metric)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<8}{:>10}", "metric", "value").expect("string write");
        for (name, v) in [("ACC", self.acc), ("P", self.p), ("R", self.r), ("F1", self.f1), ("FPR", self.fpr)] {
            let flag = if self.is_defined(&name.to_lowercase()) { "" } else { " *" };
            writeln!(out, "{name:<8}{v:>10.4}{flag}").expect("string write");
        }
        let c = self.counts;
        writeln!(out, "TP={} TN={} FP={} FN={}", c.tp, c.tn, c.fp, c.fn_).expect("string write");
        if !self.undefined.is_empty() {
            writeln!(out, "* zero denominator, reported as 0").expect("string write");
        }
        out
    }
}

pub fn compute_metrics(predictions: &[bool], labels: &[bool]) -> Result<MetricReport> {
    Ok(MetricReport::from_counts(ConfusionCounts::from_pairs(predictions, labels)?))
}

/// `|wear(cut(first alarm)) - limit|`, or `None` when nothing alarmed.
pub fn detection_deviation(first_alarm_window: Option<usize>, wear: &WearTable, limit_um: f64) -> Result<Option<f64>> {
    first_alarm_window.map(|w| wear.wear_of(w).map(|x| (x - limit_um).abs())).transpose()
}

/// Metrics plus detection deviation for one monitored stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricReport,
    pub first_alarm_window: Option<usize>,
    pub first_alarm_cut: Option<usize>,
    pub deviation_um: Option<f64>,
    pub limit_um: f64,
}

impl Evaluation {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("evaluation serialisation")
    }

    pub fn to_table(&self) -> String {
        let mut out = self.metrics.to_table();
        match self.deviation_um {
            Some(d) => writeln!(out, "{:<8}{:>10.2} um (cut {})", "Error", d, self.first_alarm_cut.unwrap_or(0)),
            None => writeln!(out, "{:<8}{:>10}", "Error", "N/A"),
        }
        .expect("string write");
        out
    }
}

/// Scores the alarm decisions of a monitored stream against wear labels.
/// Records without a health index (the baseline buffer) are skipped.
pub fn evaluate_records(records: &[HealthRecord], wear: &WearTable, limit_um: f64) -> Result<Evaluation> {
    let scored: Vec<&HealthRecord> = records.iter().filter(|r| r.hi.is_some()).collect();
    let windows: Vec<usize> = scored.iter().map(|r| r.window_index).collect();
    let labels = label_windows(wear, &windows, limit_um)?;
    let predictions: Vec<bool> = scored.iter().map(|r| r.alarm).collect();
    let metrics = compute_metrics(&predictions, &labels)?;
    let first_alarm_window = records.iter().find(|r| r.alarm).map(|r| r.window_index);
    let first_alarm_cut = first_alarm_window.and_then(|w| wear.cut_of(w)).map(|c| c.cut_id);
    let deviation_um = detection_deviation(first_alarm_window, wear, limit_um)?;
    Ok(Evaluation { metrics, first_alarm_window, first_alarm_cut, deviation_um, limit_um })
}
