//! Run configuration: a `key = value` text file plus overrides.
//!
//! Blank lines and `#` comments are ignored. Keys are flat; synthetic-data
//! keys carry a `synth.` prefix and data paths a `data.` prefix.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{Injection, SynthSpec};
use crate::error::{MaatError, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// Which scores set the detection threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdPool {
    /// Training and test scores together.
    Combined,
    TrainOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub has_header: bool,
    pub label_column: Option<String>,
    /// Percent of pooled points flagged anomalous.
    pub anomaly_ratio: f64,
    pub threshold_pool: ThresholdPool,
    pub point_adjust: bool,
    /// Overlap threshold for range metrics.
    pub range_tau: f64,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            train_path: None,
            test_path: None,
            has_header: true,
            label_column: Some("label".into()),
            anomaly_ratio: 0.5,
            threshold_pool: ThresholdPool::Combined,
            point_adjust: false,
            range_tau: 0.5,
            out_dir: None,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| MaatError::Config(format!("invalid value '{value}' for {key}")))
}

impl RunConfig {
    /// Defaults overridden by `path` (if any), then by `overrides`
    /// (`key=value` strings) in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| MaatError::io(p, e))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| MaatError::Config(format!("override '{o}' is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MaatError::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Sets one key; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                self.model.seed = self.seed;
                self.train.seed = self.seed;
            }
            "input_dim" => return Err(MaatError::Config("input_dim is taken from the data".into())),
            "lambda" => t.lambda = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.eps = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "lr_decay" => {
                t.lr_decay = match value {
                    "none" | "off" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "shuffle" => t.shuffle = parse(key, value)?,
            "data.train" => self.train_path = Some(PathBuf::from(value)),
            "data.test" => self.test_path = Some(PathBuf::from(value)),
            "data.has_header" => self.has_header = parse(key, value)?,
            "data.label_column" => {
                self.label_column = match value {
                    "" | "none" => None,
                    v => Some(v.to_string()),
                }
            }
            "anomaly_ratio" => self.anomaly_ratio = parse(key, value)?,
            "threshold_pool" => {
                self.threshold_pool = match value {
                    "combined" => ThresholdPool::Combined,
                    "train" => ThresholdPool::TrainOnly,
                    _ => {
                        return Err(MaatError::Config(format!(
                            "threshold_pool must be combined or train, got '{value}'"
                        )))
                    }
                }
            }
            "point_adjust" => self.point_adjust = parse(key, value)?,
            "range_tau" => self.range_tau = parse(key, value)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "synth.length" => self.synth.length = parse(key, value)?,
            "synth.channels" => self.synth.channels = parse(key, value)?,
            "synth.components" => self.synth.components = parse(key, value)?,
            "synth.noise" => self.synth.noise = parse(key, value)?,
            "synth.seed" => self.synth.seed = parse(key, value)?,
            "synth.injections" => {
                self.synth.injections = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse::<Injection>)
                    .collect::<Result<_>>()?
            }
            _ => {
                if !self.model.set(key, value)? {
                    return Err(MaatError::Config(format!("unknown key '{key}'")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, ok) in [
            ("window", self.model.window > 0),
            ("batch_size", self.train.batch_size > 0),
            ("d_model", self.model.d_model > 0),
            ("anomaly_ratio", self.anomaly_ratio > 0.0),
        ] {
            if !ok {
                return Err(MaatError::Config(format!("{name} must be positive")));
            }
        }
        if self.anomaly_ratio >= 100.0 {
            return Err(MaatError::Config("anomaly_ratio must be below 100".into()));
        }
        if !(self.range_tau > 0.0 && self.range_tau <= 1.0) {
            return Err(MaatError::Config("range_tau must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(MaatError::Config("dropout must lie in [0, 1)".into()));
        }
        self.train.validate()?;
        // Dimensions other than input_dim are checked with a placeholder.
        ModelConfig {
            input_dim: 1,
            ..self.model.clone()
        }
        .validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(
            &path,
            "# toy run\nwindow = 16\nd_model = 8 # small\nn_heads = 2\nseed = 9\nsynth.injections = 10:5:spike:8, 40:3:level-shift:4\n",
        )
        .unwrap();
        let cfg = RunConfig::load(Some(&path), &["window=32".into(), "lambda = 1.5".into()]).unwrap();
        assert_eq!(cfg.model.window, 32);
        assert_eq!(cfg.model.d_model, 8);
        assert_eq!(cfg.train.lambda, 1.5);
        assert_eq!((cfg.seed, cfg.model.seed, cfg.train.seed), (9, 9, 9));
        assert_eq!(cfg.synth.injections.len(), 2);
        assert_eq!(cfg.synth.anomaly_mass(), 8);
    }

    #[test]
    fn rejects_unknown_and_non_positive() {
        assert!(matches!(
            RunConfig::load(None, &["colour=red".into()]),
            Err(MaatError::Config(_))
        ));
        for bad in [
            "window=0",
            "batch_size=0",
            "d_model=0",
            "anomaly_ratio=0",
            "anomaly_ratio=-1",
        ] {
            assert!(RunConfig::load(None, &[bad.into()]).is_err(), "{bad}");
        }
        assert!(RunConfig::load(None, &["n_heads=3".into()]).is_err());
        assert!(RunConfig::load(None, &["nonsense".into()]).is_err());
    }

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg.model.window, 100);
        assert_eq!(cfg.anomaly_ratio, 0.5);
        assert!(!cfg.point_adjust);
        assert_eq!(cfg.threshold_pool, ThresholdPool::Combined);
    }
}
