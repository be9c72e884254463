//! Slice metrics, the consecutive-slice area rules and scan verdicts.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicePrediction {
    pub scan_id: String,
    pub slice_index: usize,
    pub label_pred: Label,
    pub score: f64,
    pub ground_truth: Option<Label>,
    pub tamper_area_id: Option<String>,
}

pub fn write_predictions<W: Write>(out: W, preds: &[SlicePrediction]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in preds {
        w.serialize(p)?;
    }
    w.flush()
        .map_err(|e| Error::Data(format!("writing predictions: {e}")))?;
    Ok(())
}

pub fn read_predictions<R: Read>(input: R) -> Result<Vec<SlicePrediction>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Confusion counts with fake as the positive class. Ratios with a zero
/// denominator are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

impl MetricsReport {
    pub fn from_counts(tp: usize, tn: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        Self {
            tp,
            tn,
            fp,
            fn_,
            accuracy: ratio(tp + tn, tp + tn + fp + fn_),
            precision,
            recall,
            f1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn slice_metrics(preds: &[SlicePrediction]) -> Result<MetricsReport> {
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for p in preds {
        let truth = p.ground_truth.ok_or_else(|| {
            Error::Data(format!(
                "{} slice {} has no ground truth",
                p.scan_id, p.slice_index
            ))
        })?;
        match (p.label_pred.is_fake(), truth.is_fake()) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(MetricsReport::from_counts(tp, tn, fp, fn_))
}

/// `k` positives out of `m` consecutive slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AreaVerdictSpec {
    pub window: usize,
    pub threshold: usize,
}

impl Default for AreaVerdictSpec {
    fn default() -> Self {
        Self {
            window: 10,
            threshold: 9,
        }
    }
}

impl AreaVerdictSpec {
    pub fn validate(&self) -> Result<()> {
        if self.threshold == 0 || self.threshold > self.window {
            return Err(Error::Config(format!(
                "area rule needs 1 <= k <= m, got k={} m={}",
                self.threshold, self.window
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AreaOutcome {
    TruePositive,
    FalseNegative,
}

/// Positives in every window `[s, s + m)`, via prefix sums.
fn window_counts(pos: &[bool], m: usize) -> Vec<usize> {
    let mut prefix = vec![0; pos.len() + 1];
    for (i, &p) in pos.iter().enumerate() {
        prefix[i + 1] = prefix[i] + p as usize;
    }
    (0..=pos.len().saturating_sub(m))
        .filter(|&s| s + m <= pos.len())
        .map(|s| prefix[s + m] - prefix[s])
        .collect()
}

/// Verdict for a tampered area whose central slice is `pos[central]`: a
/// true positive iff some `m`-window containing the central slice holds at
/// least `k` positives.
pub fn area_verdict(pos: &[bool], central: usize, spec: &AreaVerdictSpec) -> Result<AreaOutcome> {
    spec.validate()?;
    let m = spec.window;
    if pos.len() < m {
        return Err(Error::InsufficientData {
            needed: m,
            got: pos.len(),
        });
    }
    if central >= pos.len() {
        return Err(Error::Data(format!(
            "central slice {central} outside {} slices",
            pos.len()
        )));
    }
    let counts = window_counts(pos, m);
    let lo = (central + 1).saturating_sub(m);
    let hi = central.min(pos.len() - m);
    let hit = (lo..=hi).any(|s| counts[s] >= spec.threshold);
    Ok(if hit {
        AreaOutcome::TruePositive
    } else {
        AreaOutcome::FalseNegative
    })
}

/// Qualifying intervals of a real region, merged where they overlap.
///
/// A run of at least `k` consecutive positives qualifies, as does any
/// `m`-window with at least `k` positives (trimmed to its first and last
/// positive). The first clause implies the second whenever `k <= m`, so it
/// only matters for inputs shorter than `m`.
pub fn real_false_positive_areas(pos: &[bool], spec: &AreaVerdictSpec) -> Vec<(usize, usize)> {
    let (m, k) = (spec.window, spec.threshold);
    let mut intervals = Vec::new();
    let mut run_start = None;
    for i in 0..=pos.len() {
        match (pos.get(i).copied().unwrap_or(false), run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                if i - s >= k {
                    intervals.push((s, i - 1));
                }
                run_start = None;
            }
            _ => {}
        }
    }
    if pos.len() >= m {
        for (s, &c) in window_counts(pos, m).iter().enumerate() {
            if c >= k {
                let first = (s..s + m).find(|&i| pos[i]).unwrap();
                let last = (s..s + m).rev().find(|&i| pos[i]).unwrap();
                intervals.push((first, last));
            }
        }
    }
    intervals.sort_unstable();
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (a, b) in intervals {
        match merged.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => merged.push((a, b)),
        }
    }
    merged
}

pub fn real_area_false_positive(pos: &[bool], spec: &AreaVerdictSpec) -> usize {
    real_false_positive_areas(pos, spec).len()
}

/// Tampered iff some `m` consecutive slices contain at least `n` positives.
pub fn scan_verdict(labels: &[bool], n: usize, m: usize) -> Result<bool> {
    if n == 0 || n > m || m > labels.len() {
        return Err(Error::Config(format!(
            "scan rule needs 1 <= n <= m <= slices, got n={n} m={m} slices={}",
            labels.len()
        )));
    }
    Ok(window_counts(labels, m).into_iter().any(|c| c >= n))
}

/// Chebyshev distance between lattice cells.
pub fn chebyshev(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

/// Restricts slice positives to those belonging to the same 3D area as the
/// central slice. Starting at `anchor` on the central slice, the area grows
/// outward one slice at a time; a positive slice joins when its peak cell is
/// within `radius` of the last joined peak on its side.
pub fn associate_area(
    pos: &[bool],
    peaks: &[Option<(usize, usize)>],
    central: usize,
    anchor: (usize, usize),
    radius: usize,
) -> Result<Vec<bool>> {
    if pos.len() != peaks.len() || central >= pos.len() {
        return Err(Error::Shape(format!(
            "{} verdicts, {} peaks, central slice {central}",
            pos.len(),
            peaks.len()
        )));
    }
    let mut out = vec![false; pos.len()];
    let mut join = |i: usize, last: &mut (usize, usize)| {
        if let (true, Some(p)) = (pos[i], peaks[i]) {
            if chebyshev(p, *last) <= radius {
                out[i] = true;
                *last = p;
            }
        }
    };
    let mut last = anchor;
    join(central, &mut last);
    let centre_ref = last;
    for i in central + 1..pos.len() {
        join(i, &mut last);
    }
    last = centre_ref;
    for i in (0..central).rev() {
        join(i, &mut last);
    }
    Ok(out)
}

/// Area under the ROC curve by the rank statistic (ties count one half).
pub fn roc_auc(scores: &[f64], truth: &[Label]) -> Option<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(truth)
        .filter(|(_, l)| l.is_fake())
        .map(|(s, _)| *s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(truth)
        .filter(|(_, l)| !l.is_fake())
        .map(|(s, _)| *s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub test_set: String,
    pub method: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

/// Per-test-set metrics as CSV; absent ratios are empty fields.
pub fn write_metrics_csv<W: Write>(out: W, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "test_set",
        "method",
        "tp",
        "tn",
        "fp",
        "fn",
        "accuracy",
        "precision",
        "recall",
        "f1",
    ])?;
    let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.test_set.clone(),
            r.method.clone(),
            m.tp.to_string(),
            m.tn.to_string(),
            m.fp.to_string(),
            m.fn_.to_string(),
            f(m.accuracy),
            f(m.precision),
            f(m.recall),
            f(m.f1),
        ])?;
    }
    w.flush()
        .map_err(|e| Error::Data(format!("writing metrics: {e}")))?;
    Ok(())
}

/// Fixed-width table with `-` for absent ratios.
pub fn format_summary(rows: &[ReportRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:<10} {:>5} {:>5} {:>5} {:>5} {:>9} {:>9} {:>9} {:>9}",
        "Test set", "Method", "TP", "TN", "FP", "FN", "Accuracy", "Precision", "Recall", "F1-score"
    );
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{:<12} {:<10} {:>5} {:>5} {:>5} {:>5} {:>9} {:>9} {:>9} {:>9}",
            r.test_set,
            r.method,
            m.tp,
            m.tn,
            m.fp,
            m.fn_,
            f(m.accuracy),
            f(m.precision),
            f(m.recall),
            f(m.f1)
        );
    }
    s
}
