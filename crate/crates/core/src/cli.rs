//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, ThresholdPool};
use crate::data::{compute_stats, load_csv, normalize, synth_split, windows, SeriesDataset};
use crate::error::{MaatError, Result};
use crate::metrics::{evaluate, volume_metrics, write_curves_csv};
use crate::model::{Checkpoint, ModelConfig, ModelParams};
use crate::scoring::{
    detect, loss_differential, point_adjust, read_scores_csv, score_series, threshold_from_ratio, write_loss_diff_csv,
    write_scores_csv, LossDiffRow, ScoreRow,
};
use crate::training::{read_loss_csv, write_loss_csv, Phase, Trainer};

/// Environment variable naming the root under which run directories are made.
pub const RUN_ROOT_ENV: &str = "MAAT_RUN_ROOT";

#[derive(Debug, Parser)]
#[command(
    name = "maat",
    version,
    about = "Time-series anomaly detection with sparse attention and a state-space skip path"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Key-value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key (repeatable), e.g. `--set window=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (default: a new run directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate labeled synthetic train/test CSVs.
    Synth(Common),
    /// Train a model and write a checkpoint and loss history.
    Train(Common),
    /// Score the test series with a trained checkpoint.
    Score {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compute metrics from a scores CSV and a labeled CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Scores CSV written by `score`.
        #[arg(long)]
        scores: PathBuf,
        /// Labeled series (label column from `data.label_column`).
        #[arg(long)]
        truth: PathBuf,
        /// Also write ROC and PR curve points.
        #[arg(long)]
        curves: bool,
    },
    /// Per-batch log loss differential between two loss histories.
    LossDiff {
        #[command(flatten)]
        common: Common,
        /// Reference model's loss history.
        #[arg(long)]
        reference: PathBuf,
        /// This model's loss history.
        #[arg(long)]
        model: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &MaatError) -> i32 {
    match e {
        MaatError::Divergence { .. } => 2,
        _ => 1,
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(c) => {
            let (cfg, out) = prepare(&c)?;
            cmd_synth(&cfg, &out)
        }
        Command::Train(c) => {
            let (cfg, out) = prepare(&c)?;
            cmd_train(&cfg, &out)
        }
        Command::Score { common, checkpoint } => {
            let (cfg, out) = prepare(&common)?;
            cmd_score(&cfg, &checkpoint, &out)
        }
        Command::Eval {
            common,
            scores,
            truth,
            curves,
        } => {
            let (cfg, out) = prepare(&common)?;
            cmd_eval(&cfg, &scores, &truth, curves, &out)
        }
        Command::LossDiff {
            common,
            reference,
            model,
        } => {
            let (_, out) = prepare(&common)?;
            cmd_loss_diff(&reference, &model, &out.join("loss_diff.csv"))
        }
    }
}

fn prepare(c: &Common) -> Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::load(c.config.as_deref(), &c.overrides)?;
    let out = match (&c.out, &cfg.out_dir) {
        (Some(o), _) | (None, Some(o)) => o.clone(),
        (None, None) => {
            let root = std::env::var_os(RUN_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| "runs".into());
            let secs = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            root.join(format!("{secs}-seed{}", cfg.seed))
        }
    };
    fs::create_dir_all(&out).map_err(|e| MaatError::io(&out, e))?;
    Ok((cfg, out))
}

/// Writes `train.csv` and `test.csv` (labeled) into `out`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.synth.validate()?;
    let (train, test) = synth_split(&cfg.synth)?;
    train.write_csv(&out.join("train.csv"))?;
    test.write_csv(&out.join("test.csv"))?;
    let anomalies = test
        .labels
        .as_ref()
        .map_or(0, |l| l.iter().filter(|&&v| v == 1).count());
    println!(
        "synth: train {} x {}, test {} x {}, {} anomalous points in {} injections -> {}",
        train.len(),
        train.channels(),
        test.len(),
        test.channels(),
        anomalies,
        cfg.synth.injections.len(),
        out.display()
    );
    Ok(())
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| MaatError::Config(format!("{key} is not set")))
}

fn load_series(cfg: &RunConfig, path: &Path, labeled: bool) -> Result<SeriesDataset> {
    let label = if labeled { cfg.label_column.as_deref() } else { None };
    match load_csv(path, cfg.has_header, label) {
        // Training data may come without the label column.
        Err(MaatError::Format { .. }) if labeled => load_csv(path, cfg.has_header, None),
        other => other,
    }
}

fn load_unlabeled(cfg: &RunConfig, path: &Path) -> Result<SeriesDataset> {
    let ds = load_series(cfg, path, true)?;
    Ok(SeriesDataset { labels: None, ..ds })
}

/// Trains on `data.train` and writes `checkpoint.bin`, `loss.csv` and
/// `map_checks.csv`. On divergence the last stable parameters are still
/// written before the error is returned.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let path = require(&cfg.train_path, "data.train")?;
    let raw = load_unlabeled(cfg, path)?;
    let stats = compute_stats(&raw);
    let ds = normalize(&raw, Some(&stats))?;
    let model_cfg = ModelConfig {
        input_dim: ds.channels(),
        ..cfg.model.clone()
    };
    let data = windows(&ds, model_cfg.window, true)?;
    if data.count() == 0 {
        return Err(MaatError::Config(format!(
            "training series has {} points, fewer than one window of {}",
            ds.len(),
            model_cfg.window
        )));
    }
    let mut trainer = Trainer::new(ModelParams::init(&model_cfg)?, cfg.train.clone())?;
    let outcome = trainer.run(&data);
    let ck = Checkpoint {
        model: trainer.last_stable.clone(),
        norm: Some(stats),
    };
    ck.save(&out.join("checkpoint.bin"))?;
    write_loss_csv(&out.join("loss.csv"), &trainer.history)?;
    write_map_checks(&out.join("map_checks.csv"), &trainer)?;
    outcome?;
    let last = trainer.history.last().map_or(f64::NAN, |r| r.recon_loss);
    println!(
        "train: {} windows, {} epochs, {} steps, final recon loss {last:.6} -> {}",
        data.count(),
        cfg.train.epochs,
        trainer.map_checks.len(),
        out.display()
    );
    Ok(())
}

fn write_map_checks(path: &Path, trainer: &Trainer) -> Result<()> {
    let mut text = String::from("epoch,batch,max_row_error,min_entry\n");
    for c in &trainer.map_checks {
        text.push_str(&format!(
            "{},{},{},{}\n",
            c.epoch, c.batch, c.max_row_error, c.min_entry
        ));
    }
    fs::write(path, text).map_err(|e| MaatError::io(path, e))
}

/// Scores `data.test` and writes `scores.csv`.
pub fn cmd_score(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let expected = ck.model.config.input_dim;
    let test_raw = load_series(cfg, require(&cfg.test_path, "data.test")?, true)?;
    if test_raw.channels() != expected {
        return Err(MaatError::Dimension(format!(
            "checkpoint expects d = {expected}, test data has d = {}",
            test_raw.channels()
        )));
    }
    let norm = |ds: &SeriesDataset| normalize(ds, ck.norm.as_ref());
    let test = norm(&test_raw)?;
    let test_scores = score_series(&ck.model, &test)?;
    let mut pool = match &cfg.train_path {
        Some(p) => {
            let train = load_unlabeled(cfg, p)?;
            if train.channels() != expected {
                return Err(MaatError::Dimension(format!(
                    "checkpoint expects d = {expected}, training data has d = {}",
                    train.channels()
                )));
            }
            score_series(&ck.model, &norm(&train)?)?.scores
        }
        None if cfg.threshold_pool == ThresholdPool::TrainOnly => {
            return Err(MaatError::Config("threshold_pool = train needs data.train".into()))
        }
        None => Vec::new(),
    };
    if cfg.threshold_pool == ThresholdPool::Combined {
        pool.extend_from_slice(&test_scores.scores);
    }
    let tau = threshold_from_ratio(&pool, cfg.anomaly_ratio)?;
    let n = test_scores.scores.len();
    let raw = detect(&test_scores.scores, tau, false, None)?;
    let adjusted = match &test_raw.labels {
        Some(l) => Some(point_adjust(&raw, &l[..n])?),
        None => None,
    };
    let rows: Vec<ScoreRow> = (0..n)
        .map(|i| ScoreRow {
            position: i,
            score: test_scores.scores[i],
            threshold: tau,
            raw_pred: raw[i],
            adjusted_pred: adjusted.as_ref().map(|a| a[i]),
        })
        .collect();
    write_scores_csv(&out.join("scores.csv"), &rows)?;
    let flagged = raw.iter().filter(|&&v| v == 1).count();
    println!(
        "score: {n} of {} points scored, threshold {tau:.6e}, {flagged} flagged ({:.3}%) -> {}",
        test_raw.len(),
        100.0 * flagged as f64 / n.max(1) as f64,
        out.display()
    );
    Ok(())
}

/// Writes `metrics_raw.json` and `metrics_adjusted.json` (and optionally
/// `curves.csv`).
pub fn cmd_eval(cfg: &RunConfig, scores: &Path, truth: &Path, curves: bool, out: &Path) -> Result<()> {
    let rows = read_scores_csv(scores)?;
    let label_column = cfg
        .label_column
        .as_deref()
        .ok_or_else(|| MaatError::Config("data.label_column is required for eval".into()))?;
    let truth_ds = load_csv(truth, cfg.has_header, Some(label_column))?;
    let labels = truth_ds.labels.as_ref().expect("label column requested");
    let misaligned = |m: String| MaatError::Format {
        path: scores.to_path_buf(),
        message: m,
    };
    if rows.len() > labels.len() {
        return Err(misaligned(format!(
            "{} scores for {} labeled points",
            rows.len(),
            labels.len()
        )));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(i, r)| r.position != *i) {
        return Err(misaligned(format!(
            "row {} has position {}, expected {i}",
            i + 2,
            r.position
        )));
    }
    let truth = &labels[..rows.len()];
    let score: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let raw: Vec<u8> = rows.iter().map(|r| r.raw_pred).collect();
    let adjusted = point_adjust(&raw, truth)?;
    for (name, pred) in [("metrics_raw.json", &raw), ("metrics_adjusted.json", &adjusted)] {
        let bundle = evaluate(pred, truth, &score, cfg.range_tau)?;
        let path = out.join(name);
        let text = serde_json::to_string_pretty(&bundle.to_json()).expect("json");
        fs::write(&path, text + "\n").map_err(|e| MaatError::io(&path, e))?;
        println!(
            "eval ({}): P {:.4} R {:.4} F1 {:.4} Acc {:.4}",
            if name.contains("raw") { "raw" } else { "point-adjusted" },
            bundle.precision,
            bundle.recall,
            bundle.f1,
            bundle.accuracy
        );
    }
    if curves {
        write_curves_csv(&out.join("curves.csv"), &volume_metrics(&score, truth)?)?;
    }
    Ok(())
}

/// Minimize-phase reconstruction losses, one per training step.
pub fn step_losses(path: &Path) -> Result<Vec<f64>> {
    Ok(read_loss_csv(path)?
        .into_iter()
        .filter(|r| r.phase == Phase::Minimize)
        .map(|r| r.recon_loss)
        .collect())
}

/// Writes `batch,L_AT,L_MAAT,delta` for two loss histories of equal length.
pub fn cmd_loss_diff(reference: &Path, model: &Path, out: &Path) -> Result<()> {
    let (l_at, l_maat) = (step_losses(reference)?, step_losses(model)?);
    let delta = loss_differential(&l_at, &l_maat)?;
    let rows: Vec<LossDiffRow> = (0..delta.len())
        .map(|i| LossDiffRow {
            batch: i,
            l_at: l_at[i],
            l_maat: l_maat[i],
            delta: delta[i],
        })
        .collect();
    write_loss_diff_csv(out, &rows)?;
    let better = delta.iter().filter(|&&d| d > 0.0).count();
    println!(
        "loss-diff: {} batches, {better} with lower loss -> {}",
        rows.len(),
        out.display()
    );
    Ok(())
}
