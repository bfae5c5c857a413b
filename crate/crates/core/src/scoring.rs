//! Association discrepancy, per-point anomaly scores, ratio thresholds and
//! detection.

use std::path::Path;

use crate::data::{windows, SeriesDataset};
use crate::error::{MaatError, Result};
use crate::model::ModelParams;
use crate::numerics::{sym_kl_value, Tensor};
use crate::training::csv_err;

/// Largest tolerated deviation of a map row sum from 1.
pub const STOCHASTIC_TOL: f64 = 1e-6;

fn check_stochastic(t: &Tensor, what: &str) -> Result<()> {
    let n = t.last_dim().max(1);
    for (r, row) in t.data().chunks(n).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|&v| v < 0.0) {
            return Err(MaatError::Contract(format!(
                "{what} row {r} is not stochastic (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Layer- and head-averaged symmetric KL between matching rows.
///
/// Maps are `[B, H, N, N]`; the result is `[B, N]`.
pub fn association_discrepancy(prior_list: &[&Tensor], series_list: &[&Tensor]) -> Result<Tensor> {
    if prior_list.len() != series_list.len() || prior_list.is_empty() {
        return Err(MaatError::Contract(format!(
            "{} prior maps vs {} series maps",
            prior_list.len(),
            series_list.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (p, s) in prior_list.iter().zip(series_list) {
        check_stochastic(p, "prior")?;
        check_stochastic(s, "series")?;
        let kl = sym_kl_value(p, s)?;
        total = Some(match total {
            None => kl,
            Some(mut t) => {
                if t.shape() != kl.shape() {
                    return Err(MaatError::Dimension("layer maps differ in shape".into()));
                }
                t.data_mut().iter_mut().zip(kl.data()).for_each(|(a, b)| *a += b);
                t
            }
        });
    }
    let layers = prior_list.len() as f64;
    Ok(total.expect("non-empty").map(|v| v / layers))
}

/// `softmax(-assdis)` over one window's positions.
pub fn discrepancy_weights(assdis: &[f64]) -> Vec<f64> {
    let max = assdis.iter().map(|v| -v).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = assdis.iter().map(|v| (-v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Per-point score `softmax(-assdis)_i * ||x_i - x_hat_i||^2` for one window.
///
/// `x` and `recon` are `[N, d]`, `assdis` has length `N`.
pub fn anomaly_score(x: &Tensor, recon: &Tensor, assdis: &[f64]) -> Result<Vec<f64>> {
    if x.shape() != recon.shape() || x.ndim() != 2 || x.shape()[0] != assdis.len() {
        return Err(MaatError::Dimension(format!(
            "score inputs {:?}, {:?} and {} discrepancies",
            x.shape(),
            recon.shape(),
            assdis.len()
        )));
    }
    let d = x.last_dim();
    let w = discrepancy_weights(assdis);
    Ok((0..assdis.len())
        .map(|i| {
            let err: f64 = (0..d)
                .map(|c| (x.data()[i * d + c] - recon.data()[i * d + c]).powi(2))
                .sum();
            w[i] * err
        })
        .collect())
}

/// Threshold leaving the top `ratio` percent of `pool` at or above it: the
/// k-th largest score with `k = max(1, ceil(ratio * n / 100))`.
pub fn threshold_from_ratio(pool: &[f64], ratio: f64) -> Result<f64> {
    if pool.is_empty() {
        return Err(MaatError::Contract("empty score pool".into()));
    }
    if !(ratio > 0.0 && ratio < 100.0) {
        return Err(MaatError::Contract(format!("anomaly ratio {ratio} outside (0, 100)")));
    }
    let mut sorted = pool.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((ratio * pool.len() as f64 / 100.0) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[k.min(pool.len()) - 1])
}

/// Marks every true segment that contains at least one predicted point.
pub fn point_adjust(pred: &[u8], truth: &[u8]) -> Result<Vec<u8>> {
    if pred.len() != truth.len() {
        return Err(MaatError::Contract(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut out = pred.to_vec();
    let mut i = 0;
    while i < truth.len() {
        if truth[i] == 1 {
            let start = i;
            while i < truth.len() && truth[i] == 1 {
                i += 1;
            }
            if pred[start..i].contains(&1) {
                out[start..i].iter_mut().for_each(|v| *v = 1);
            }
        } else {
            i += 1;
        }
    }
    Ok(out)
}

/// `pred_i = score_i >= tau`, optionally point-adjusted against `truth`.
pub fn detect(scores: &[f64], tau: f64, adjust: bool, truth: Option<&[u8]>) -> Result<Vec<u8>> {
    if !tau.is_finite() {
        return Err(MaatError::Contract(format!("threshold {tau} is not finite")));
    }
    let raw: Vec<u8> = scores.iter().map(|&s| u8::from(s >= tau)).collect();
    match (adjust, truth) {
        (false, _) => Ok(raw),
        (true, Some(t)) => point_adjust(&raw, t),
        (true, None) => Err(MaatError::Contract("point adjustment needs truth labels".into())),
    }
}

/// `ln(l_at) - ln(l_maat)` elementwise.
pub fn loss_differential(l_at: &[f64], l_maat: &[f64]) -> Result<Vec<f64>> {
    if l_at.len() != l_maat.len() {
        return Err(MaatError::Contract(format!(
            "{} reference losses vs {} losses",
            l_at.len(),
            l_maat.len()
        )));
    }
    if let Some(bad) = l_at.iter().chain(l_maat).find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(MaatError::Domain(format!("loss {bad} is not positive")));
    }
    Ok(l_at.iter().zip(l_maat).map(|(a, m)| a.ln() - m.ln()).collect())
}

/// Scores of the complete windows of a series.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    /// One score per covered position, in time order.
    pub scores: Vec<f64>,
    pub window_starts: Vec<usize>,
    pub threshold: Option<f64>,
}

/// Number of windows per forward pass while scoring.
pub const SCORE_BATCH: usize = 32;

/// Scores every complete window of `ds` (already normalized).
pub fn score_series(model: &ModelParams, ds: &SeriesDataset) -> Result<ScoreVector> {
    let cfg = &model.config;
    if ds.channels() != cfg.input_dim {
        return Err(MaatError::Dimension(format!(
            "model expects d = {}, data has d = {}",
            cfg.input_dim,
            ds.channels()
        )));
    }
    let batch = windows(ds, cfg.window, true)?;
    let (w, d) = (cfg.window, cfg.input_dim);
    let mut scores = Vec::with_capacity(batch.count() * w);
    let mut start = 0;
    while start < batch.count() {
        let end = (start + SCORE_BATCH).min(batch.count());
        let x = batch.slice(start..end);
        let out = model.forward(&x)?;
        let assdis = association_discrepancy(&out.prior_list(), &out.series_list())?;
        for b in 0..end - start {
            let xb = Tensor::new(vec![w, d], x.data()[b * w * d..(b + 1) * w * d].to_vec())?;
            let rb = Tensor::new(vec![w, d], out.recon.data()[b * w * d..(b + 1) * w * d].to_vec())?;
            scores.extend(anomaly_score(&xb, &rb, &assdis.data()[b * w..(b + 1) * w])?);
        }
        start = end;
    }
    Ok(ScoreVector {
        scores,
        window_starts: batch.window_starts,
        threshold: None,
    })
}

/// One row of the scores file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub position: usize,
    pub score: f64,
    pub threshold: f64,
    pub raw_pred: u8,
    /// Absent when no labels were available.
    pub adjusted_pred: Option<u8>,
}

pub const SCORES_HEADER: [&str; 5] = ["position", "score", "threshold", "raw_pred", "adjusted_pred"];

pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(SCORES_HEADER).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.position.to_string(),
            r.score.to_string(),
            r.threshold.to_string(),
            r.raw_pred.to_string(),
            r.adjusted_pred.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| MaatError::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != SCORES_HEADER {
        return Err(MaatError::Format {
            path: path.to_path_buf(),
            message: format!("expected header {}", SCORES_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = i + 2;
        let err = |c: usize| MaatError::Parse {
            path: path.to_path_buf(),
            row,
            column: c + 1,
            message: format!("invalid {}", SCORES_HEADER[c]),
        };
        let cell = |c: usize| rec.get(c).unwrap_or("").trim();
        let pred = |c: usize| match cell(c) {
            "0" => Ok(0u8),
            "1" => Ok(1u8),
            _ => Err(err(c)),
        };
        out.push(ScoreRow {
            position: cell(0).parse().map_err(|_| err(0))?,
            score: cell(1).parse().map_err(|_| err(1))?,
            threshold: cell(2).parse().map_err(|_| err(2))?,
            raw_pred: pred(3)?,
            adjusted_pred: if cell(4).is_empty() { None } else { Some(pred(4)?) },
        });
    }
    Ok(out)
}

/// One row of the loss-differential file.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDiffRow {
    pub batch: usize,
    pub l_at: f64,
    pub l_maat: f64,
    pub delta: f64,
}

pub fn write_loss_diff_csv(path: &Path, rows: &[LossDiffRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["batch", "L_AT", "L_MAAT", "delta"])
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.batch.to_string(),
            r.l_at.to_string(),
            r.l_maat.to_string(),
            r.delta.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| MaatError::io(path, e))
}
