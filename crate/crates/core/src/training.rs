//! Two-phase minimax training with Adam.
//!
//! Both phases share one forward pass per batch:
//!
//! ```text
//! minimize: MSE(X, X_hat) - lambda * mean|AssDis(P, stopgrad(S))|
//! maximize: MSE(X, X_hat) + lambda * mean|AssDis(stopgrad(P), S)|
//! ```
//!
//! The minimize gradient is applied first, then the maximize gradient.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::ForwardCtx;
use crate::data::{windows, SeriesDataset, WindowBatch};
use crate::error::{MaatError, Result};
use crate::model::{forward, ForwardVars, ModelConfig, ModelParams};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::BoundParams;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the discrepancy term.
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
    /// Per-epoch multiplicative learning-rate decay; `None` keeps it fixed.
    pub lr_decay: Option<f64>,
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 3.0,
            lr: 1e-4,
            epochs: 10,
            batch_size: 128,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            lr_decay: None,
            shuffle: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MaatError::Config(m.to_string()));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if let Some(g) = self.lr_decay {
            if !(g > 0.0 && g <= 1.0) {
                return bad("lr_decay must lie in (0, 1]");
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(g) => self.lr * g.powi(epoch as i32),
            None => self.lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Minimize,
    Maximize,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Minimize => "minimize",
            Phase::Maximize => "maximize",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = MaatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minimize" => Ok(Phase::Minimize),
            "maximize" => Ok(Phase::Maximize),
            _ => Err(MaatError::Format {
                path: Default::default(),
                message: format!("unknown phase '{s}'"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub phase: Phase,
    pub recon_loss: f64,
    /// Signed discrepancy contribution to the phase loss.
    pub assdis_term: f64,
}

/// Row-stochasticity of all attention maps seen in one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapCheck {
    pub epoch: usize,
    pub batch: usize,
    pub max_row_error: f64,
    pub min_entry: f64,
}

/// Moment accumulators of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// One bias-corrected Adam step; `step` is the 1-based step number.
pub fn adam_update(param: &mut [f64], grad: &[f64], state: &mut Moments, step: u64, h: &AdamHyper) {
    let c1 = 1.0 - h.beta1.powf(step as f64);
    let c2 = 1.0 - h.beta2.powf(step as f64);
    for i in 0..param.len() {
        let g = grad[i] + h.weight_decay * param[i];
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}

/// Adam state over a whole parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub moments: Vec<Moments>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &ModelParams) -> Self {
        OptimizerState {
            moments: model.store.iter().map(|(_, t)| Moments::zeros(t.len())).collect(),
            step: 0,
        }
    }

    pub fn apply(&mut self, model: &mut ModelParams, grads: &[Vec<f64>], h: &AdamHyper) -> Result<()> {
        if grads.len() != self.moments.len() {
            return Err(MaatError::Dimension(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.moments.len()
            )));
        }
        self.step += 1;
        for ((t, g), st) in model.store.tensors_mut().zip(grads).zip(self.moments.iter_mut()) {
            adam_update(t.data_mut(), g, st, self.step, h);
        }
        Ok(())
    }
}

/// Both phase losses built on one forward pass.
pub struct PhaseGraph {
    pub params: BoundParams,
    pub forward: ForwardVars,
    pub recon: Var,
    /// Mean |AssDis| with the series side held constant.
    pub prior_side: Var,
    /// Mean |AssDis| with the prior side held constant.
    pub series_side: Var,
    pub minimize: Var,
    pub maximize: Var,
}

/// Mean over layers, batch and positions of |AssDis(p, s)|.
fn mean_discrepancy(tape: &mut Tape, pairs: &[(Var, Var)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(p, s) in pairs {
        let kl = tape.sym_kl(p, s)?;
        let kl = tape.abs(kl)?;
        let m = tape.mean(kl)?;
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    let total = total.ok_or_else(|| MaatError::Contract("model has no layers".into()))?;
    tape.scale(total, 1.0 / pairs.len() as f64)
}

pub fn phase_graph(
    tape: &mut Tape,
    model: &ModelParams,
    batch: &Tensor,
    lambda: f64,
    ctx: &mut ForwardCtx<'_>,
) -> Result<PhaseGraph> {
    let params = model.store.bind(tape, true)?;
    let x = tape.constant(batch.clone())?;
    let fwd = forward(tape, x, &model.config, &params, ctx)?;
    let recon = tape.mse(fwd.recon, x)?;
    let mut prior_pairs = Vec::new();
    let mut series_pairs = Vec::new();
    for maps in fwd.maps() {
        let (p_const, s_const) = (tape.detach(maps.prior), tape.detach(maps.series));
        prior_pairs.push((maps.prior, s_const));
        series_pairs.push((p_const, maps.series));
    }
    let prior_side = mean_discrepancy(tape, &prior_pairs)?;
    let series_side = mean_discrepancy(tape, &series_pairs)?;
    let prior_term = tape.scale(prior_side, -lambda)?;
    let minimize = tape.add(recon, prior_term)?;
    let series_term = tape.scale(series_side, lambda)?;
    let maximize = tape.add(recon, series_term)?;
    Ok(PhaseGraph {
        params,
        forward: fwd,
        recon,
        prior_side,
        series_side,
        minimize,
        maximize,
    })
}

/// Gradient of `root` for every parameter, in store order (zeros where the
/// root does not reach).
pub fn gradients(tape: &Tape, params: &BoundParams, root: Var) -> Result<Vec<Vec<f64>>> {
    let g = tape.backward(root)?;
    Ok(params
        .ordered()
        .iter()
        .map(|&v| match g.data(v) {
            Some(d) => d.to_vec(),
            None => vec![0.0; tape.value(v).len()],
        })
        .collect())
}

/// Result of one minimax step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub records: [LossRecord; 2],
    pub map_check: MapCheck,
}

fn divergence(err: MaatError, epoch: usize, batch: usize, phase: Phase) -> MaatError {
    match err {
        MaatError::NonFinite(_) => MaatError::Divergence {
            epoch,
            batch,
            phase: phase.as_str(),
        },
        other => other,
    }
}

/// One minimize update followed by one maximize update on `batch`.
#[allow(clippy::too_many_arguments)]
pub fn minimax_step(
    model: &mut ModelParams,
    opt: &mut OptimizerState,
    batch: &Tensor,
    cfg: &TrainConfig,
    epoch: usize,
    batch_index: usize,
    ctx: &mut ForwardCtx<'_>,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let graph = phase_graph(&mut tape, model, batch, cfg.lambda, ctx)
        .map_err(|e| divergence(e, epoch, batch_index, Phase::Minimize))?;
    let (mut max_row_error, mut min_entry) = (0.0f64, f64::INFINITY);
    for maps in graph.forward.maps() {
        let (e, m) = maps.values(&tape).stochasticity();
        max_row_error = max_row_error.max(e);
        min_entry = min_entry.min(m);
    }
    let recon = tape.value(graph.recon).data()[0];
    let records = [
        LossRecord {
            epoch,
            batch: batch_index,
            phase: Phase::Minimize,
            recon_loss: recon,
            assdis_term: -cfg.lambda * tape.value(graph.prior_side).data()[0],
        },
        LossRecord {
            epoch,
            batch: batch_index,
            phase: Phase::Maximize,
            recon_loss: recon,
            assdis_term: cfg.lambda * tape.value(graph.series_side).data()[0],
        },
    ];
    let hyper = AdamHyper {
        lr: cfg.lr_at(epoch),
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
    };
    let g_min = gradients(&tape, &graph.params, graph.minimize)?;
    let g_max = gradients(&tape, &graph.params, graph.maximize)?;
    for (phase, g) in [(Phase::Minimize, &g_min), (Phase::Maximize, &g_max)] {
        if g.iter().flatten().any(|v| !v.is_finite()) {
            return Err(divergence(MaatError::NonFinite("gradient"), epoch, batch_index, phase));
        }
        opt.apply(model, g, &hyper)?;
        if model.store.iter().any(|(_, t)| !t.is_finite()) {
            return Err(divergence(MaatError::NonFinite("parameter"), epoch, batch_index, phase));
        }
    }
    Ok(StepOutcome {
        records,
        map_check: MapCheck {
            epoch,
            batch: batch_index,
            max_row_error,
            min_entry,
        },
    })
}

/// Owns the model, optimizer and logs for a training run.
pub struct Trainer {
    pub model: ModelParams,
    pub opt: OptimizerState,
    pub cfg: TrainConfig,
    pub history: Vec<LossRecord>,
    pub map_checks: Vec<MapCheck>,
    /// Parameters after the last step that completed without divergence.
    pub last_stable: ModelParams,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: ModelParams, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            opt: OptimizerState::new(&model),
            last_stable: model.clone(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            cfg,
            history: Vec::new(),
            map_checks: Vec::new(),
        })
    }

    /// Runs every epoch over `data`. On divergence the error is returned and
    /// `last_stable` holds the parameters from before the failing step.
    pub fn run(&mut self, data: &WindowBatch) -> Result<()> {
        if data.count() == 0 {
            return Err(MaatError::Contract("no complete training window".into()));
        }
        let mut order: Vec<usize> = (0..data.count()).collect();
        for epoch in 0..self.cfg.epochs {
            if self.cfg.shuffle {
                order.shuffle(&mut self.rng);
            }
            for (bi, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
                let parts: Vec<Tensor> = chunk.iter().map(|&i| data.windows.outer(i)).collect();
                let batch = Tensor::stack(&parts)?;
                let mut ctx = ForwardCtx {
                    rng: if self.model.config.dropout > 0.0 {
                        Some(&mut self.rng)
                    } else {
                        None
                    },
                };
                let out = minimax_step(&mut self.model, &mut self.opt, &batch, &self.cfg, epoch, bi, &mut ctx);
                match out {
                    Ok(step) => {
                        self.history.extend(step.records);
                        self.map_checks.push(step.map_check);
                        self.last_stable = self.model.clone();
                    }
                    Err(e) => {
                        self.model = self.last_stable.clone();
                        return Err(e);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Trains a freshly initialized model on complete windows of `train`.
pub fn fit(
    train: &SeriesDataset,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<(ModelParams, Vec<LossRecord>)> {
    let data = windows(train, model_cfg.window, true)?;
    let mut trainer = Trainer::new(ModelParams::init(model_cfg)?, cfg.clone())?;
    trainer.run(&data)?;
    Ok((trainer.model, trainer.history))
}

pub const LOSS_HEADER: [&str; 5] = ["epoch", "batch", "phase", "recon_loss", "assdis_term"];

/// Writes the loss history; reals use the shortest round-trip form.
pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(LOSS_HEADER).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.batch.to_string(),
            r.phase.to_string(),
            r.recon_loss.to_string(),
            r.assdis_term.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| MaatError::io(path, e))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != LOSS_HEADER {
        return Err(MaatError::Format {
            path: path.to_path_buf(),
            message: format!("expected header {}", LOSS_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = i + 2;
        let cell = |c: usize| -> Result<&str> {
            rec.get(c).ok_or_else(|| MaatError::Format {
                path: path.to_path_buf(),
                message: format!("row {row} is short"),
            })
        };
        let parse_err = |c: usize, what: &str| MaatError::Parse {
            path: path.to_path_buf(),
            row,
            column: c + 1,
            message: format!("invalid {what}"),
        };
        out.push(LossRecord {
            epoch: cell(0)?.parse().map_err(|_| parse_err(0, "epoch"))?,
            batch: cell(1)?.parse().map_err(|_| parse_err(1, "batch"))?,
            phase: cell(2)?.parse().map_err(|_| parse_err(2, "phase"))?,
            recon_loss: cell(3)?.parse().map_err(|_| parse_err(3, "recon_loss"))?,
            assdis_term: cell(4)?.parse().map_err(|_| parse_err(4, "assdis_term"))?,
        });
    }
    Ok(out)
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> MaatError {
    MaatError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}
