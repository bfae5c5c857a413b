//! Anomaly sparse attention: a learnable Gaussian prior association next to a
//! series association restricted to a local window around each query.

use std::ops::Range;
use std::rc::Rc;

use rand::Rng;

use crate::error::{MaatError, Result};
use crate::numerics::{gaussian_prior_value, Tape, Tensor, Var};
use crate::params::{uniform_fan_in, BoundParams, ParamStore};

/// Lower bound added to the softplus output of the scale projection.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub block_size: usize,
    pub dropout: f64,
    /// Divide scores by `sqrt(d_model)`; when false, by `sqrt(d_model / n_heads)`.
    pub scale_by_d_model: bool,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(MaatError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.block_size == 0 {
            return Err(MaatError::Config("block_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MaatError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Multiplier applied to query-key dot products.
    pub fn score_scale(&self) -> f64 {
        let denom = if self.scale_by_d_model {
            self.d_model
        } else {
            self.d_head()
        };
        1.0 / (denom as f64).sqrt()
    }
}

/// Keys visible to query `i`: `{ j : |j - i| <= block_size / 2 } ∩ [0, n)`.
pub fn local_window(i: usize, n: usize, block_size: usize) -> Range<usize> {
    assert!(i < n, "position {i} outside sequence of length {n}");
    // |j - i| <= block_size / 2 over the reals is |j - i| <= floor(block_size / 2) over integers.
    let half = block_size / 2;
    i.saturating_sub(half)..(i + half + 1).min(n)
}

/// Row-major `[n, n]` membership mask of the local windows.
pub fn window_mask(n: usize, block_size: usize) -> Rc<[bool]> {
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in local_window(i, n, block_size) {
            mask[i * n + j] = true;
        }
    }
    mask.into()
}

/// Gaussian prior association for one sequence: `sigma: [H, N]` -> `[H, N, N]`.
pub fn prior_association(sigma: &Tensor) -> Result<Tensor> {
    if sigma.ndim() != 2 {
        return Err(MaatError::Dimension(format!(
            "sigma must be [H,N], got {:?}",
            sigma.shape()
        )));
    }
    if let Some(bad) = sigma.data().iter().find(|&&s| s <= 0.0 || s.is_nan()) {
        return Err(MaatError::Parameter(format!("prior scale must be positive, got {bad}")));
    }
    let (h, n) = (sigma.shape()[0], sigma.shape()[1]);
    let mut by_pos = vec![0.0; h * n];
    for hi in 0..h {
        for i in 0..n {
            by_pos[i * h + hi] = sigma.data()[hi * n + i];
        }
    }
    let p = gaussian_prior_value(&Tensor::new(vec![1, n, h], by_pos)?);
    p.reshape(vec![h, n, n])
}

/// Series association restricted to local windows: `q, k: [H, N, d_head]` -> `[H, N, N]`.
///
/// `scale` multiplies the dot products (see [`AttentionConfig::score_scale`]).
pub fn sparse_series_association(q: &Tensor, k: &Tensor, block_size: usize, scale: f64) -> Result<Tensor> {
    if q.shape() != k.shape() || q.ndim() != 3 {
        return Err(MaatError::Dimension(format!(
            "queries {:?} and keys {:?} must share a [H,N,d] shape",
            q.shape(),
            k.shape()
        )));
    }
    let (h, n, dh) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let mut out = vec![0.0; h * n * n];
    for hi in 0..h {
        for i in 0..n {
            let qi = &q.data()[(hi * n + i) * dh..][..dh];
            let window = local_window(i, n, block_size);
            let logits: Vec<f64> = window
                .clone()
                .map(|j| {
                    let kj = &k.data()[(hi * n + j) * dh..][..dh];
                    scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for (j, l) in window.zip(&logits) {
                out[(hi * n + i) * n + j] = (l - max).exp() / total;
            }
        }
    }
    Tensor::new(vec![h, n, n], out)
}

/// Attention maps of one layer, batched: `prior`/`series` are `[B, H, N, N]`,
/// `sigma` is `[B, H, N]`.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub prior: Tensor,
    pub series: Tensor,
    pub sigma: Tensor,
}

impl AttentionMaps {
    /// Largest deviation of any row sum from 1 and the smallest entry, over
    /// both maps.
    pub fn stochasticity(&self) -> (f64, f64) {
        let n = self.prior.last_dim();
        let mut worst = 0.0f64;
        let mut min = f64::INFINITY;
        for t in [&self.prior, &self.series] {
            for row in t.data().chunks(n.max(1)) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                min = row.iter().copied().fold(min, f64::min);
            }
        }
        (worst, min)
    }
}

/// Tape handles of one layer's attention maps.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub prior: Var,
    pub series: Var,
    /// `[B, N, H]`
    pub sigma: Var,
}

impl AttentionVars {
    pub fn values(&self, tape: &Tape) -> AttentionMaps {
        let sigma = tape.value(self.sigma);
        let (b, n, h) = (sigma.shape()[0], sigma.shape()[1], sigma.shape()[2]);
        let mut by_head = vec![0.0; b * h * n];
        for bi in 0..b {
            for i in 0..n {
                for hi in 0..h {
                    by_head[(bi * h + hi) * n + i] = sigma.data()[(bi * n + i) * h + hi];
                }
            }
        }
        AttentionMaps {
            prior: tape.value(self.prior).clone(),
            series: tape.value(self.series).clone(),
            sigma: Tensor::new(vec![b, h, n], by_head).expect("sigma shape"),
        }
    }
}

/// Dropout switch and randomness for a forward pass.
pub struct ForwardCtx<'r> {
    pub rng: Option<&'r mut dyn rand::RngCore>,
}

impl ForwardCtx<'_> {
    pub fn eval() -> ForwardCtx<'static> {
        ForwardCtx { rng: None }
    }
}

pub(crate) fn dropout(tape: &mut Tape, x: Var, rate: f64, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
    match ctx.rng.as_deref_mut() {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let factors = (0..tape.value(x).len())
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            tape.mul_const(x, factors)
        }
        _ => Ok(x),
    }
}

/// Parameter names of one attention layer, relative to its prefix.
pub fn init_params(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut impl Rng) {
    let d = cfg.d_model;
    for proj in ["q", "k", "v", "o"] {
        store.insert(format!("{prefix}.w{proj}"), uniform_fan_in(rng, &[d, d], d));
        store.insert(format!("{prefix}.b{proj}"), Tensor::zeros(&[d]));
    }
    store.insert(format!("{prefix}.wsigma"), uniform_fan_in(rng, &[d, cfg.n_heads], d));
    store.insert(format!("{prefix}.bsigma"), Tensor::zeros(&[cfg.n_heads]));
    store.insert(format!("{prefix}.ln_g"), Tensor::full(&[d], 1.0));
    store.insert(format!("{prefix}.ln_b"), Tensor::zeros(&[d]));
}

/// One anomaly sparse attention layer over `x: [B, N, d_model]`.
///
/// Returns `LayerNorm(x + proj(S V))` together with the layer's maps.
pub fn anomaly_sparse_attention(
    tape: &mut Tape,
    x: Var,
    cfg: &AttentionConfig,
    params: &BoundParams,
    prefix: &str,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(Var, AttentionVars)> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 || shape[2] != cfg.d_model || shape[1] == 0 {
        return Err(MaatError::Dimension(format!(
            "attention input {:?} does not match d_model {}",
            shape, cfg.d_model
        )));
    }
    let n = shape[1];
    let p = params.scope(prefix);
    let q = tape.linear(x, p.var("wq")?, Some(p.var("bq")?))?;
    let k = tape.linear(x, p.var("wk")?, Some(p.var("bk")?))?;
    let v = tape.linear(x, p.var("wv")?, Some(p.var("bv")?))?;

    let raw_sigma = tape.linear(x, p.var("wsigma")?, Some(p.var("bsigma")?))?;
    let sigma = tape.softplus(raw_sigma)?;
    let sigma = tape.add_scalar(sigma, SIGMA_FLOOR)?;
    let prior = tape.gaussian_prior(sigma)?;

    let mask = window_mask(n, cfg.block_size);
    let scores = tape.head_scores(q, k, cfg.n_heads, cfg.score_scale(), Some(mask.clone()))?;
    let series = tape.softmax_rows(scores, Some(&mask))?;

    let attended = tape.head_apply(series, v)?;
    let attended = dropout(tape, attended, cfg.dropout, ctx)?;
    let out = tape.linear(attended, p.var("wo")?, Some(p.var("bo")?))?;
    let res = tape.add(x, out)?;
    let y = tape.layer_norm(res, p.var("ln_g")?, p.var("ln_b")?)?;
    Ok((y, AttentionVars { prior, series, sigma }))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{grad_check, softmax_rows};

    fn cfg(d_model: usize, n_heads: usize, block_size: usize) -> AttentionConfig {
        AttentionConfig {
            d_model,
            n_heads,
            block_size,
            dropout: 0.0,
            scale_by_d_model: true,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn layer(cfg: &AttentionConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init_params(&mut store, "attn", cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        store
    }

    fn run(cfg: &AttentionConfig, store: &ParamStore, x: &Tensor) -> (Tensor, AttentionMaps) {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let (y, maps) = anomaly_sparse_attention(&mut tape, xv, cfg, &bound, "attn", &mut ForwardCtx::eval()).unwrap();
        (tape.value(y).clone(), maps.values(&tape))
    }

    #[test]
    fn window_examples() {
        assert_eq!(local_window(5, 100, 4), 3..8);
        assert_eq!(local_window(0, 100, 4), 0..3);
        assert_eq!(local_window(3, 5, 8), 0..5);
        // odd block sizes: |j - i| <= 2.5
        assert_eq!(local_window(10, 100, 5), 8..13);
        for i in 0..7 {
            assert_eq!(local_window(i, 7, 12), 0..7);
        }
    }

    #[test]
    fn prior_single_position() {
        let p = prior_association(&Tensor::new(vec![1, 1], vec![0.7]).unwrap()).unwrap();
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn prior_flattens_for_large_scale() {
        let p = prior_association(&Tensor::full(&[1, 5], 1e6)).unwrap();
        for &v in p.data() {
            assert!((v - 0.2).abs() < 1e-9);
        }
    }

    #[test]
    fn prior_matches_kernel_formula() {
        let p = prior_association(&Tensor::full(&[1, 4], 0.5)).unwrap();
        let k: Vec<f64> = (0..4).map(|j| (-(j as f64).powi(2) / (2.0 * 0.25)).exp()).collect();
        let z: f64 = k.iter().sum();
        for j in 0..4 {
            assert!((p.get(&[0, 0, j]) - k[j] / z).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_rejects_non_positive_sigma() {
        let r = prior_association(&Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap());
        assert!(matches!(r, Err(MaatError::Parameter(_))));
    }

    #[test]
    fn identical_keys_give_uniform_window() {
        let q = random(&[2, 9, 3], 1);
        let k = Tensor::full(&[2, 9, 3], 0.3);
        let s = sparse_series_association(&q, &k, 4, 0.5).unwrap();
        for h in 0..2 {
            for i in 0..9 {
                let w = local_window(i, 9, 4);
                for j in 0..9 {
                    let want = if w.contains(&j) { 1.0 / w.len() as f64 } else { 0.0 };
                    assert!((s.get(&[h, i, j]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn wide_window_equals_dense_softmax() {
        let (h, n, dh) = (2, 7, 3);
        let q = random(&[h, n, dh], 2);
        let k = random(&[h, n, dh], 3);
        let s = sparse_series_association(&q, &k, 2 * (n - 1), 0.4).unwrap();
        let mut logits = vec![0.0; h * n * n];
        for hi in 0..h {
            for i in 0..n {
                for j in 0..n {
                    logits[(hi * n + i) * n + j] =
                        0.4 * (0..dh).map(|c| q.get(&[hi, i, c]) * k.get(&[hi, j, c])).sum::<f64>();
                }
            }
        }
        let dense = softmax_rows(&Tensor::new(vec![h, n, n], logits).unwrap(), None).unwrap();
        assert!(s.max_abs_diff(&dense) < 1e-12);
    }

    #[test]
    fn three_by_three_hand_case() {
        // One head, N = 3, block_size = 2 -> windows {0,1}, {0,1,2}, {1,2}.
        let q = Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, -1.0]).unwrap();
        let k = Tensor::new(vec![1, 3, 1], vec![0.5, -1.0, 2.0]).unwrap();
        let s = sparse_series_association(&q, &k, 2, 1.0).unwrap();
        let e = f64::exp;
        let row0 = [e(0.5), e(-1.0)];
        let row1 = [e(1.0), e(-2.0), e(4.0)];
        let row2 = [e(1.0), e(-2.0)];
        let z0: f64 = row0.iter().sum();
        let z1: f64 = row1.iter().sum();
        let z2: f64 = row2.iter().sum();
        let want = [
            row0[0] / z0,
            row0[1] / z0,
            0.0,
            row1[0] / z1,
            row1[1] / z1,
            row1[2] / z1,
            0.0,
            row2[0] / z2,
            row2[1] / z2,
        ];
        for (got, want) in s.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn single_position_sequence() {
        let c = cfg(8, 2, 4);
        let (y, maps) = run(&c, &layer(&c, 4), &random(&[1, 1, 8], 5));
        assert_eq!(y.shape(), &[1, 1, 8]);
        assert!(y.is_finite());
        assert_eq!(maps.series.data(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_and_map_invariants() {
        let c = cfg(8, 2, 4);
        let store = layer(&c, 6);
        let x = random(&[2, 16, 8], 7);
        let (y, maps) = run(&c, &store, &x);
        assert_eq!(y.shape(), x.shape());
        let (row_err, min) = maps.stochasticity();
        assert!(row_err < 1e-6 && min >= 0.0);
        assert!(maps.sigma.data().iter().all(|&s| s > 0.0));
        let mask = window_mask(16, 4);
        for (idx, &v) in maps.series.data().iter().enumerate() {
            let inside = mask[idx % 256];
            assert_eq!(v != 0.0, inside, "support mismatch at {idx}");
        }
    }

    #[test]
    fn rejects_wrong_width() {
        let c = cfg(8, 2, 4);
        let store = layer(&c, 8);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false).unwrap();
        let xv = tape.constant(random(&[1, 4, 6], 9)).unwrap();
        let r = anomaly_sparse_attention(&mut tape, xv, &c, &bound, "attn", &mut ForwardCtx::eval());
        assert!(matches!(r, Err(MaatError::Dimension(_))));
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let c = cfg(8, 2, 6);
        let store = layer(&c, 10);
        let x = random(&[3, 10, 8], 11);
        let perm = [2, 0, 1];
        let xp = Tensor::stack(&perm.map(|i| x.outer(i))).unwrap();
        let (y, _) = run(&c, &store, &x);
        let (yp, _) = run(&c, &store, &xp);
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(yp.outer(k), y.outer(i));
        }
    }

    #[test]
    fn input_gradient_passes_check() {
        let c = cfg(8, 2, 4);
        let store = layer(&c, 12);
        let x = random(&[2, 6, 8], 13);
        for weighted in [false, true] {
            let err = grad_check(
                |t, xv| {
                    let bound = store.bind(t, false)?;
                    let (y, _) = anomaly_sparse_attention(t, xv, &c, &bound, "attn", &mut ForwardCtx::eval())?;
                    if !weighted {
                        return t.sum(y);
                    }
                    let w = t.constant(random(t.value(y).shape(), 14))?;
                    let p = t.mul(y, w)?;
                    t.sum(p)
                },
                &x,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "weighted={weighted}: {err}");
        }
    }
}
