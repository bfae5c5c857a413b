//! Point, affiliation, range and volume based detection metrics.

use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{MaatError, Result};
use crate::training::csv_err;

/// Sorted, disjoint half-open intervals `[start, end)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IntervalSet {
    intervals: Vec<(usize, usize)>,
}

impl IntervalSet {
    pub fn new(intervals: Vec<(usize, usize)>) -> Result<Self> {
        for (i, &(s, e)) in intervals.iter().enumerate() {
            if e <= s {
                return Err(MaatError::Contract(format!("empty interval [{s}, {e})")));
            }
            if i > 0 && s < intervals[i - 1].1 {
                return Err(MaatError::Contract(format!(
                    "interval [{s}, {e}) overlaps or is out of order"
                )));
            }
        }
        Ok(IntervalSet { intervals })
    }

    pub fn intervals(&self) -> &[(usize, usize)] {
        &self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }
}

/// Maximal runs of ones.
pub fn to_intervals(v: &[u8]) -> IntervalSet {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &x) in v.iter().enumerate() {
        match (x == 1, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, v.len()));
    }
    IntervalSet { intervals: out }
}

fn same_len(pred: &[u8], truth: &[u8]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(MaatError::Contract(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Point-wise precision, recall, F1 and accuracy; empty denominators give 0.
pub fn point_prf(pred: &[u8], truth: &[u8]) -> Result<PointPrf> {
    same_len(pred, truth)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == 1, t == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(PointPrf {
        precision,
        recall,
        f1: harmonic(precision, recall),
        accuracy: ratio(tp + tn, pred.len()),
    })
}

/// Indicator-sum affiliation precision and recall:
/// `aff_p = |P ∩ T| / |P|`, `aff_r = |T ∩ P| / |T|`, absent on empty sets.
pub fn affiliation(pred: &[u8], truth: &[u8]) -> Result<(Option<f64>, Option<f64>)> {
    same_len(pred, truth)?;
    let both = pred.iter().zip(truth).filter(|(&p, &t)| p == 1 && t == 1).count();
    let np = pred.iter().filter(|&&p| p == 1).count();
    let nt = truth.iter().filter(|&&t| t == 1).count();
    let f = |n: usize| (n > 0).then(|| both as f64 / n as f64);
    Ok((f(np), f(nt)))
}

/// Fraction of `a` covered by `b`.
pub fn overlap(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    inter as f64 / (a.1 - a.0) as f64
}

pub const DEFAULT_OVERLAP_TAU: f64 = 0.5;

fn covered_fraction(of: &IntervalSet, by: &IntervalSet, tau: f64) -> Option<f64> {
    if of.is_empty() {
        return None;
    }
    let hit = of
        .intervals()
        .iter()
        .filter(|&&a| by.intervals().iter().any(|&b| overlap(a, b) >= tau))
        .count();
    Some(hit as f64 / of.len() as f64)
}

/// Range recall (share of true ranges covered to at least `tau` by some
/// predicted range) and range precision (the dual over predicted ranges).
pub fn range_metrics(truth: &IntervalSet, pred: &IntervalSet, tau: f64) -> Result<(Option<f64>, Option<f64>)> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(MaatError::Contract(format!("overlap threshold {tau} outside (0, 1]")));
    }
    Ok((covered_fraction(truth, pred, tau), covered_fraction(pred, truth, tau)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeMetrics {
    pub v_roc: Option<f64>,
    pub v_pr: Option<f64>,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub roc: Vec<(f64, f64)>,
    /// `(recall, precision)` starting at `(0, 1)`.
    pub pr: Vec<(f64, f64)>,
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Threshold sweep over the unique scores with `pred = score >= t`, counting
/// each sample as one unit of volume; areas by the trapezoid rule.
pub fn volume_metrics(scores: &[f64], truth: &[u8]) -> Result<VolumeMetrics> {
    if scores.len() != truth.len() {
        return Err(MaatError::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            truth.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MaatError::Contract("non-finite score".into()));
    }
    let pos = truth.iter().filter(|&&t| t == 1).count();
    let neg = truth.len() - pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut roc = vec![(0.0, 0.0)];
    let mut pr = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if truth[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.push((ratio(fp, neg), ratio(tp, pos)));
        pr.push((ratio(tp, pos), ratio(tp, tp + fp)));
    }
    let v_roc = (pos > 0 && neg > 0).then(|| trapezoid(&roc).clamp(0.0, 1.0));
    let v_pr = (pos > 0).then(|| trapezoid(&pr).clamp(0.0, 1.0));
    Ok(VolumeMetrics { v_roc, v_pr, roc, pr })
}

/// Full metric set for one prediction vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricBundle {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub aff_p: Option<f64>,
    pub aff_r: Option<f64>,
    pub r_a_r: Option<f64>,
    pub r_a_p: Option<f64>,
    pub v_roc: Option<f64>,
    pub v_pr: Option<f64>,
}

impl MetricBundle {
    /// Flat JSON object; absent metrics are `null`.
    pub fn to_json(&self) -> Value {
        let opt = |v: Option<f64>| v.map(Value::from).unwrap_or(Value::Null);
        let mut m = Map::new();
        m.insert("accuracy".into(), Value::from(self.accuracy));
        m.insert("precision".into(), Value::from(self.precision));
        m.insert("recall".into(), Value::from(self.recall));
        m.insert("f1".into(), Value::from(self.f1));
        m.insert("aff_p".into(), opt(self.aff_p));
        m.insert("aff_r".into(), opt(self.aff_r));
        m.insert("r_a_r".into(), opt(self.r_a_r));
        m.insert("r_a_p".into(), opt(self.r_a_p));
        m.insert("v_roc".into(), opt(self.v_roc));
        m.insert("v_pr".into(), opt(self.v_pr));
        Value::Object(m)
    }
}

/// Evaluates predictions (and the scores behind them) against labels.
pub fn evaluate(pred: &[u8], truth: &[u8], scores: &[f64], tau: f64) -> Result<MetricBundle> {
    let prf = point_prf(pred, truth)?;
    let (aff_p, aff_r) = affiliation(pred, truth)?;
    let (r_a_r, r_a_p) = range_metrics(&to_intervals(truth), &to_intervals(pred), tau)?;
    let vol = volume_metrics(scores, truth)?;
    Ok(MetricBundle {
        accuracy: prf.accuracy,
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        aff_p,
        aff_r,
        r_a_r,
        r_a_p,
        v_roc: vol.v_roc,
        v_pr: vol.v_pr,
    })
}

/// Writes both curves as `curve,x,y` rows.
pub fn write_curves_csv(path: &Path, vol: &VolumeMetrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["curve", "x", "y"]).map_err(|e| csv_err(path, e))?;
    for (name, pts) in [("roc", &vol.roc), ("pr", &vol.pr)] {
        for (x, y) in pts {
            w.write_record([name.to_string(), x.to_string(), y.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| MaatError::io(path, e))
}
