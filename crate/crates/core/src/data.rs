//! Series ingestion, normalization, windowing and synthetic generation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{MaatError, Result};
use crate::numerics::Tensor;

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// A multivariate series `[T, d]` with optional point labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    pub name: String,
    pub values: Tensor,
    pub labels: Option<Vec<u8>>,
    /// Statistics the values were normalized with, if any.
    pub norm_stats: Option<NormStats>,
}

impl SeriesDataset {
    pub fn new(name: impl Into<String>, values: Tensor, labels: Option<Vec<u8>>) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(MaatError::Dimension(format!(
                "series must be [T,d], got {:?}",
                values.shape()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != values.shape()[0] {
                return Err(MaatError::Dimension(format!(
                    "{} labels for {} rows",
                    l.len(),
                    values.shape()[0]
                )));
            }
            if l.iter().any(|&v| v > 1) {
                return Err(MaatError::Contract("labels must be 0 or 1".into()));
            }
        }
        Ok(SeriesDataset {
            name: name.into(),
            values,
            labels,
            norm_stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    /// Writes `c0..c{d-1}[,label]` with a header row. Values use the shortest
    /// representation that parses back to the same `f64`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let d = self.channels();
        let mut header: Vec<String> = (0..d).map(|c| format!("c{c}")).collect();
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for (t, row) in self.values.data().chunks(d.max(1)).enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            if let Some(l) = &self.labels {
                rec.push(l[t].to_string());
            }
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| MaatError::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> MaatError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => MaatError::io(path, io),
        other => MaatError::Format {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

/// Reads a comma-separated series. Every column except the label column is a
/// feature. Without a header, `label_column` must be a 0-based column index.
pub fn load_csv(path: &Path, has_header: bool, label_column: Option<&str>) -> Result<SeriesDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let label_idx = match label_column {
        None => None,
        Some(name) if has_header => {
            let headers = reader.headers().map_err(|e| csv_io(path, e))?;
            Some(
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| MaatError::Format {
                        path: path.to_path_buf(),
                        message: format!("label column '{name}' not in header"),
                    })?,
            )
        }
        Some(idx) => Some(idx.parse::<usize>().map_err(|_| MaatError::Format {
            path: path.to_path_buf(),
            message: format!("without a header the label column must be an index, got '{idx}'"),
        })?),
    };

    let mut width = None;
    let mut data = Vec::new();
    let mut labels = label_idx.map(|_| Vec::new());
    let first_data_row = usize::from(has_header) + 1;
    for (r, rec) in reader.records().enumerate() {
        let row = r + first_data_row;
        let rec = rec.map_err(|e| csv_io(path, e))?;
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(MaatError::Format {
                    path: path.to_path_buf(),
                    message: format!("row {row} has {} cells, expected {w}", rec.len()),
                })
            }
            _ => {}
        }
        if let Some(li) = label_idx {
            if li >= rec.len() {
                return Err(MaatError::Format {
                    path: path.to_path_buf(),
                    message: format!("label column {li} beyond row width {}", rec.len()),
                });
            }
        }
        for (c, cell) in rec.iter().enumerate() {
            let parse_err = |message: String| MaatError::Parse {
                path: path.to_path_buf(),
                row,
                column: c + 1,
                message,
            };
            if Some(c) == label_idx {
                let v = match cell {
                    "0" | "0.0" => 0,
                    "1" | "1.0" => 1,
                    other => return Err(parse_err(format!("label '{other}' is not 0 or 1"))),
                };
                labels.as_mut().expect("label vec").push(v);
            } else {
                let v = f64::from_str(cell).map_err(|_| parse_err(format!("'{cell}' is not a number")))?;
                if !v.is_finite() {
                    return Err(parse_err(format!("'{cell}' is not finite")));
                }
                data.push(v);
            }
        }
    }
    let width = width.ok_or_else(|| MaatError::EmptyDataset(path.to_path_buf()))?;
    let d = width - usize::from(label_idx.is_some());
    let t = if d == 0 {
        labels.as_ref().map_or(0, Vec::len)
    } else {
        data.len() / d
    };
    if d == 0 {
        return Err(MaatError::Format {
            path: path.to_path_buf(),
            message: "no feature columns".into(),
        });
    }
    let name = path
        .file_stem()
        .map_or_else(|| "series".into(), |s| s.to_string_lossy().into_owned());
    SeriesDataset::new(name, Tensor::new(vec![t, d], data)?, labels)
}

/// Per-channel mean and (population) standard deviation.
pub fn compute_stats(ds: &SeriesDataset) -> NormStats {
    let (t, d) = (ds.len(), ds.channels());
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    if t == 0 {
        return NormStats { mean, std };
    }
    for row in ds.values.data().chunks(d) {
        for c in 0..d {
            mean[c] += row[c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    for row in ds.values.data().chunks(d) {
        for c in 0..d {
            std[c] += (row[c] - mean[c]).powi(2);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / t as f64).sqrt());
    NormStats { mean, std }
}

/// Z-scores every channel with `stats` (or statistics of `ds` itself).
///
/// A zero-variance channel is only centered. Normalizing a dataset again with
/// the statistics it already carries returns it unchanged.
pub fn normalize(ds: &SeriesDataset, stats: Option<&NormStats>) -> Result<SeriesDataset> {
    if let (Some(s), Some(applied)) = (stats, &ds.norm_stats) {
        if s == applied {
            return Ok(ds.clone());
        }
    }
    let stats = match stats {
        Some(s) => {
            if s.channels() != ds.channels() || s.std.len() != s.mean.len() {
                return Err(MaatError::Dimension(format!(
                    "stats for {} channels applied to {}",
                    s.channels(),
                    ds.channels()
                )));
            }
            s.clone()
        }
        None => compute_stats(ds),
    };
    let d = ds.channels();
    let mut out = ds.values.clone();
    for row in out.data_mut().chunks_mut(d.max(1)) {
        for c in 0..d {
            row[c] -= stats.mean[c];
            if stats.std[c] > 0.0 {
                row[c] /= stats.std[c];
            }
        }
    }
    Ok(SeriesDataset {
        name: ds.name.clone(),
        values: out,
        labels: ds.labels.clone(),
        norm_stats: Some(stats),
    })
}

/// Non-overlapping windows of a series.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    /// `[B, W, d]`
    pub windows: Tensor,
    pub window_starts: Vec<usize>,
    /// `B * W` point labels, when the source is labeled.
    pub labels: Option<Vec<u8>>,
    /// Number of real (non-padded) points in each window.
    pub valid: Vec<usize>,
}

impl WindowBatch {
    pub fn count(&self) -> usize {
        self.window_starts.len()
    }

    pub fn window_len(&self) -> usize {
        self.windows.shape()[1]
    }

    /// Windows `range` as a `[b, W, d]` tensor.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Tensor {
        let parts: Vec<Tensor> = range.map(|i| self.windows.outer(i)).collect();
        Tensor::stack(&parts).expect("equal window shapes")
    }
}

/// Cuts `ds` into windows of `window` points with stride `window`.
///
/// With `drop_last`, a trailing partial window is discarded; otherwise it is
/// padded by repeating the last observed row and its `valid` count is short.
pub fn windows(ds: &SeriesDataset, window: usize, drop_last: bool) -> Result<WindowBatch> {
    if window == 0 {
        return Err(MaatError::Contract("window must be at least 1".into()));
    }
    let (t, d) = (ds.len(), ds.channels());
    let full = t / window;
    let count = if drop_last || t % window == 0 { full } else { full + 1 };
    let mut data = Vec::with_capacity(count * window * d);
    let mut labels = ds.labels.as_ref().map(|_| Vec::with_capacity(count * window));
    let mut starts = Vec::with_capacity(count);
    let mut valid = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * window;
        starts.push(start);
        valid.push(window.min(t - start));
        for i in 0..window {
            let src = (start + i).min(t - 1);
            data.extend_from_slice(&ds.values.data()[src * d..(src + 1) * d]);
            if let (Some(out), Some(l)) = (labels.as_mut(), ds.labels.as_ref()) {
                out.push(if start + i < t { l[src] } else { 0 });
            }
        }
    }
    Ok(WindowBatch {
        windows: Tensor::new(vec![count, window, d], data)?,
        window_starts: starts,
        labels,
        valid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyKind {
    /// Alternating-sign excursions of `magnitude` standard deviations.
    Spike,
    /// Constant offset of `magnitude` standard deviations.
    LevelShift,
    /// Extra Gaussian noise with standard deviation `magnitude` sigma.
    NoiseBurst,
}

impl FromStr for AnomalyKind {
    type Err = MaatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spike" => Ok(AnomalyKind::Spike),
            "level-shift" => Ok(AnomalyKind::LevelShift),
            "noise-burst" => Ok(AnomalyKind::NoiseBurst),
            other => Err(MaatError::Spec(format!("unknown anomaly kind '{other}'"))),
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnomalyKind::Spike => "spike",
            AnomalyKind::LevelShift => "level-shift",
            AnomalyKind::NoiseBurst => "noise-burst",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub start: usize,
    pub duration: usize,
    pub kind: AnomalyKind,
    pub magnitude: f64,
}

impl FromStr for Injection {
    type Err = MaatError;

    /// `start:duration:kind:magnitude`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || MaatError::Spec(format!("injection '{s}' is not start:duration:kind:magnitude"));
        if parts.len() != 4 {
            return Err(bad());
        }
        Ok(Injection {
            start: parts[0].parse().map_err(|_| bad())?,
            duration: parts[1].parse().map_err(|_| bad())?,
            kind: parts[2].parse()?,
            magnitude: parts[3].parse().map_err(|_| bad())?,
        })
    }
}

impl fmt::Display for Injection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.start, self.duration, self.kind, self.magnitude)
    }
}

/// Recipe for a labeled synthetic series: a per-channel sine mixture plus
/// Gaussian noise, with anomalies injected over given intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub length: usize,
    pub channels: usize,
    /// Sine components per channel.
    pub components: usize,
    /// Standard deviation of the additive noise.
    pub noise: f64,
    pub injections: Vec<Injection>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            length: 2000,
            channels: 3,
            components: 3,
            noise: 0.1,
            injections: Vec::new(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.channels == 0 || self.components == 0 {
            return Err(MaatError::Spec(
                "length, channels and components must be positive".into(),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(MaatError::Spec(format!(
                "noise amplitude {} must be non-negative",
                self.noise
            )));
        }
        let mut order: Vec<usize> = (0..self.injections.len()).collect();
        order.sort_by_key(|&i| self.injections[i].start);
        for (k, &i) in order.iter().enumerate() {
            let inj = &self.injections[i];
            if inj.duration == 0 || inj.start + inj.duration > self.length {
                return Err(MaatError::Spec(format!(
                    "injection #{i} ({inj}) does not lie within [0, {})",
                    self.length
                )));
            }
            if !inj.magnitude.is_finite() {
                return Err(MaatError::Spec(format!(
                    "injection #{i} ({inj}) has a non-finite magnitude"
                )));
            }
            if let Some(&j) = order.get(k + 1) {
                let next = &self.injections[j];
                if next.start < inj.start + inj.duration {
                    return Err(MaatError::Spec(format!(
                        "injection #{j} ({next}) overlaps injection #{i} ({inj})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Total labeled points.
    pub fn anomaly_mass(&self) -> usize {
        self.injections.iter().map(|i| i.duration).sum()
    }
}

/// Generates the labeled series described by `spec`.
pub fn synth_generate(spec: &SynthSpec) -> Result<SeriesDataset> {
    generate(spec, 0, 0, true)
}

/// An anomaly-free training series and the labeled test series of `spec`.
///
/// Both share the sine mixture; the training series precedes the test series
/// in time and draws independent noise.
pub fn synth_split(spec: &SynthSpec) -> Result<(SeriesDataset, SeriesDataset)> {
    let mut train = generate(spec, spec.length, 1, false)?;
    train.name = "synthetic-train".into();
    let mut test = generate(spec, 0, 0, true)?;
    test.name = "synthetic-test".into();
    Ok((train, test))
}

struct Component {
    amplitude: f64,
    period: f64,
    phase: f64,
}

fn generate(spec: &SynthSpec, time_offset: usize, stream: u64, inject: bool) -> Result<SeriesDataset> {
    spec.validate()?;
    let (t_len, d) = (spec.length, spec.channels);
    let mut shape_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mixture: Vec<Vec<Component>> = (0..d)
        .map(|_| {
            (0..spec.components)
                .map(|_| Component {
                    amplitude: shape_rng.random_range(0.5..1.5),
                    period: shape_rng.random_range(20.0..200.0),
                    phase: shape_rng.random_range(0.0..std::f64::consts::TAU),
                })
                .collect()
        })
        .collect();

    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(stream + 1);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let unit = Normal::new(0.0, 1.0).expect("valid normal");

    // The time offset places the training series before the test series, so
    // anomaly-free samples at negative time are generated first.
    let start_time = -(time_offset as f64);
    let mut values = vec![0.0; t_len * d];
    for t in 0..t_len {
        let time = start_time + t as f64;
        for c in 0..d {
            let clean: f64 = mixture[c]
                .iter()
                .map(|m| m.amplitude * (std::f64::consts::TAU * time / m.period + m.phase).sin())
                .sum();
            let n = if spec.noise > 0.0 {
                noise.sample(&mut noise_rng)
            } else {
                0.0
            };
            values[t * d + c] = clean + n;
        }
    }

    let mut labels = vec![0u8; t_len];
    if inject {
        let sigma: Vec<f64> = {
            let tmp = SeriesDataset::new("tmp", Tensor::new(vec![t_len, d], values.clone())?, None)?;
            compute_stats(&tmp).std
        };
        let mut inj_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        inj_rng.set_stream(u64::MAX);
        for inj in &spec.injections {
            for (k, t) in (inj.start..inj.start + inj.duration).enumerate() {
                labels[t] = 1;
                for c in 0..d {
                    let offset = match inj.kind {
                        AnomalyKind::Spike => {
                            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                            sign * inj.magnitude * sigma[c]
                        }
                        AnomalyKind::LevelShift => inj.magnitude * sigma[c],
                        AnomalyKind::NoiseBurst => inj.magnitude * sigma[c] * unit.sample(&mut inj_rng),
                    };
                    values[t * d + c] += offset;
                }
            }
        }
    }
    SeriesDataset::new(
        "synthetic",
        Tensor::new(vec![t_len, d], values)?,
        inject.then_some(labels),
    )
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use proptest::prelude::*;

    use super::*;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn series(rows: &[Vec<f64>]) -> SeriesDataset {
        SeriesDataset::new("t", Tensor::from_rows(rows).unwrap(), None).unwrap()
    }

    #[test]
    fn load_labeled_csv() {
        let f = write("a,b,label\n1,2,0\n3,4,1\n5,6,0\n");
        let ds = load_csv(f.path(), true, Some("label")).unwrap();
        assert_eq!(ds.values.shape(), &[3, 2]);
        assert_eq!(ds.values.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(ds.labels, Some(vec![0, 1, 0]));
    }

    #[test]
    fn label_by_index_without_header() {
        let f = write("1,0,2\n3,1,4\n");
        let ds = load_csv(f.path(), false, Some("1")).unwrap();
        assert_eq!(ds.values.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ds.labels, Some(vec![0, 1]));
    }

    #[test]
    fn header_only_is_empty() {
        let f = write("a,b\n");
        assert!(matches!(
            load_csv(f.path(), true, None),
            Err(MaatError::EmptyDataset(_))
        ));
    }

    #[test]
    fn bad_cell_names_row_and_column() {
        let f = write("a,b\n1,2\n3,x\n");
        match load_csv(f.path(), true, None) {
            Err(MaatError::Parse { row, column, .. }) => assert_eq!((row, column), (3, 2)),
            other => panic!("unexpected {other:?}"),
        }
        let f = write("a,label\n1,2\n");
        assert!(matches!(
            load_csv(f.path(), true, Some("label")),
            Err(MaatError::Parse { .. })
        ));
    }

    #[test]
    fn ragged_rows_are_format_errors() {
        let f = write("a,b\n1,2\n3\n");
        assert!(matches!(load_csv(f.path(), true, None), Err(MaatError::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        let r = load_csv(Path::new("/nonexistent/series.csv"), true, None);
        assert!(matches!(r, Err(MaatError::Io { .. })));
    }

    #[test]
    fn synthetic_dump_round_trips_bitwise() {
        let spec = SynthSpec {
            length: 100,
            injections: vec!["40:5:spike:6".parse().unwrap()],
            ..SynthSpec::default()
        };
        let ds = synth_generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.csv");
        ds.write_csv(&path).unwrap();
        let back = load_csv(&path, true, Some("label")).unwrap();
        assert_eq!(back.values.data(), ds.values.data());
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let n = normalize(&series(&[vec![4.0], vec![4.0], vec![4.0]]), None).unwrap();
        assert_eq!(n.values.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn two_point_z_score() {
        let n = normalize(&series(&[vec![0.0], vec![2.0]]), None).unwrap();
        assert_eq!(n.values.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn train_stats_on_test_split() {
        let train = series(&[vec![0.0], vec![2.0]]);
        let stats = compute_stats(&train);
        let test = normalize(&series(&[vec![2.0], vec![4.0]]), Some(&stats)).unwrap();
        // (2-1)/1 and (4-1)/1
        assert_eq!(test.values.data(), &[1.0, 3.0]);
        assert!(test.values.sum() / 2.0 != 0.0);
    }

    #[test]
    fn stats_channel_mismatch() {
        let stats = compute_stats(&series(&[vec![0.0, 1.0]]));
        assert!(matches!(
            normalize(&series(&[vec![1.0]]), Some(&stats)),
            Err(MaatError::Dimension(_))
        ));
    }

    #[test]
    fn window_counts() {
        let ds = series(&(0..10).map(|i| vec![i as f64]).collect::<Vec<_>>());
        let w = windows(&ds, 4, true).unwrap();
        assert_eq!(w.window_starts, vec![0, 4]);
        assert_eq!(w.windows.shape(), &[2, 4, 1]);
        let w = windows(&ds, 4, false).unwrap();
        assert_eq!(w.window_starts, vec![0, 4, 8]);
        assert_eq!(w.valid, vec![4, 4, 2]);
        let w = windows(&ds, 11, true).unwrap();
        assert_eq!(w.count(), 0);
        assert!(matches!(windows(&ds, 0, true), Err(MaatError::Contract(_))));
    }

    #[test]
    fn benchmark_window_sizes() {
        for t in [100, 105] {
            let ds = series(&(0..t).map(|i| vec![i as f64]).collect::<Vec<_>>());
            assert_eq!(windows(&ds, t, true).unwrap().count(), 1);
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec {
            seed: 42,
            injections: vec!["100:10:level-shift:5".parse().unwrap()],
            ..SynthSpec::default()
        };
        assert_eq!(synth_generate(&spec).unwrap(), synth_generate(&spec).unwrap());
    }

    #[test]
    fn spike_duration_sets_labels() {
        let spec = SynthSpec {
            injections: vec!["300:5:spike:8".parse().unwrap()],
            ..SynthSpec::default()
        };
        let ds = synth_generate(&spec).unwrap();
        let labels = ds.labels.unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 5);
        assert!(labels[300..305].iter().all(|&l| l == 1));
    }

    #[test]
    fn spike_maximizes_z_score_inside_interval() {
        let spec = SynthSpec {
            noise: 0.0,
            seed: 9,
            injections: vec!["700:3:spike:8".parse().unwrap()],
            ..SynthSpec::default()
        };
        let ds = normalize(&synth_generate(&spec).unwrap(), None).unwrap();
        let d = ds.channels();
        let (argmax, _) =
            ds.values.data().iter().enumerate().fold(
                (0, 0.0),
                |best, (i, v)| if v.abs() > best.1 { (i, v.abs()) } else { best },
            );
        assert!((700..703).contains(&(argmax / d)));
    }

    #[test]
    fn overlapping_injections_are_rejected() {
        let spec = SynthSpec {
            injections: vec!["100:10:spike:8".parse().unwrap(), "105:3:spike:8".parse().unwrap()],
            ..SynthSpec::default()
        };
        match synth_generate(&spec) {
            Err(MaatError::Spec(msg)) => assert!(msg.contains("#1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        let spec = SynthSpec {
            length: 50,
            injections: vec!["45:10:spike:8".parse().unwrap()],
            ..SynthSpec::default()
        };
        assert!(matches!(synth_generate(&spec), Err(MaatError::Spec(_))));
    }

    #[test]
    fn split_train_is_unlabeled_and_distinct() {
        let spec = SynthSpec {
            injections: vec!["10:2:spike:8".parse().unwrap()],
            ..SynthSpec::default()
        };
        let (train, test) = synth_split(&spec).unwrap();
        assert!(train.labels.is_none());
        assert!(test.labels.is_some());
        assert_ne!(train.values, test.values);
    }

    proptest! {
        #[test]
        fn windows_reassemble_prefix(t in 1usize..60, w in 1usize..20, d in 1usize..4) {
            let rows: Vec<Vec<f64>> = (0..t).map(|i| (0..d).map(|c| (i * 10 + c) as f64).collect()).collect();
            let ds = series(&rows);
            let batch = windows(&ds, w, true).unwrap();
            let n = t / w * w;
            prop_assert_eq!(batch.windows.data(), &ds.values.data()[..n * d]);
            for pair in batch.window_starts.windows(2) {
                prop_assert_eq!(pair[1] - pair[0], w);
            }
        }

        #[test]
        fn label_mass_matches_durations(starts in proptest::collection::btree_set(0usize..40, 1..5), dur in 1usize..10) {
            let injections: Vec<Injection> = starts.iter().map(|s| Injection {
                start: s * 10, duration: dur, kind: AnomalyKind::LevelShift, magnitude: 3.0,
            }).collect();
            let spec = SynthSpec { length: 500, injections, ..SynthSpec::default() };
            let ds = synth_generate(&spec).unwrap();
            let mass = ds.labels.unwrap().iter().map(|&l| l as usize).sum::<usize>();
            prop_assert_eq!(mass, spec.anomaly_mass());
        }

        #[test]
        fn normalize_twice_is_idempotent(vals in proptest::collection::vec(-50.0f64..50.0, 2..40)) {
            let ds = series(&vals.iter().map(|&v| vec![v]).collect::<Vec<_>>());
            let once = normalize(&ds, None).unwrap();
            let stats = once.norm_stats.clone().unwrap();
            let twice = normalize(&once, Some(&stats)).unwrap();
            prop_assert_eq!(&once, &twice);
            let mean = once.values.sum() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }
}
