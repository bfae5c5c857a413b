//! Selective state-space block used on the skip path.
//!
//! Reference semantics (zero-order-hold discretization with input-dependent
//! step size and projections):
//!
//! ```text
//! [x_in, z] = x W_in
//! u         = silu(causal_conv(x_in))
//! [dt, B, C] = u W_x
//! delta     = softplus(dt W_dt + b_dt)
//! A         = -softplus(A_raw)
//! h_t       = exp(delta_t A) h_{t-1} + delta_t B_t u_t
//! y_t       = C_t h_t + D u_t
//! out       = (y * silu(z)) W_out
//! ```

use rand::Rng;

use crate::error::{MaatError, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{uniform_fan_in, BoundParams, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct SsmConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            d_model: 16,
            d_state: 16,
            d_conv: 4,
            expand: 2,
        }
    }
}

impl SsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_state == 0 || self.d_conv == 0 || self.expand == 0 {
            return Err(MaatError::Config(
                "d_model, d_state, d_conv and expand must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// Width of the low-rank step-size projection.
    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16)
    }
}

/// Zero-order-hold discretization, elementwise: `Abar = exp(delta A)`,
/// `Bbar = delta B`.
pub fn discretize(a: &Tensor, b: &Tensor, delta: &Tensor) -> Result<(Tensor, Tensor)> {
    if a.shape() != b.shape() || a.shape() != delta.shape() {
        return Err(MaatError::Dimension(format!(
            "discretize shapes {:?}, {:?}, {:?}",
            a.shape(),
            b.shape(),
            delta.shape()
        )));
    }
    if let Some(bad) = delta.data().iter().find(|&&d| d <= 0.0 || d.is_nan()) {
        return Err(MaatError::Parameter(format!("step size must be positive, got {bad}")));
    }
    let abar = a.data().iter().zip(delta.data()).map(|(a, d)| (d * a).exp()).collect();
    let bbar = b.data().iter().zip(delta.data()).map(|(b, d)| d * b).collect();
    Ok((
        Tensor::new(a.shape().to_vec(), abar)?,
        Tensor::new(a.shape().to_vec(), bbar)?,
    ))
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Inserts one block's parameters under `prefix`.
pub fn init_params(store: &mut ParamStore, prefix: &str, cfg: &SsmConfig, rng: &mut impl Rng) {
    let (d, e, n, r, k) = (cfg.d_model, cfg.d_inner(), cfg.d_state, cfg.dt_rank(), cfg.d_conv);
    store.insert(format!("{prefix}.in_w"), uniform_fan_in(rng, &[d, 2 * e], d));
    store.insert(format!("{prefix}.conv_w"), uniform_fan_in(rng, &[e, k], k));
    store.insert(format!("{prefix}.conv_b"), Tensor::zeros(&[e]));
    store.insert(format!("{prefix}.x_w"), uniform_fan_in(rng, &[e, r + 2 * n], e));
    store.insert(format!("{prefix}.dt_w"), uniform_fan_in(rng, &[r, e], r));
    // Initial step sizes log-uniform in [1e-3, 1e-1].
    let dt_b: Vec<f64> = (0..e)
        .map(|_| {
            let dt = (rng.random_range((1e-3f64).ln()..(1e-1f64).ln())).exp();
            inverse_softplus(dt)
        })
        .collect();
    store.insert(format!("{prefix}.dt_b"), Tensor::new(vec![e], dt_b).expect("dt bias"));
    // A = -(1..=N) on every channel.
    let a_raw: Vec<f64> = (0..e)
        .flat_map(|_| (1..=n).map(|s| inverse_softplus(s as f64)))
        .collect();
    store.insert(
        format!("{prefix}.a_raw"),
        Tensor::new(vec![e, n], a_raw).expect("A shape"),
    );
    store.insert(format!("{prefix}.d"), Tensor::full(&[e], 1.0));
    store.insert(format!("{prefix}.out_w"), uniform_fan_in(rng, &[e, d], e));
}

/// Projects `u: [B, L, d_inner]` to the step sizes, input and output maps,
/// then runs the recurrence.
pub fn selective_scan(tape: &mut Tape, u: Var, cfg: &SsmConfig, params: &BoundParams, prefix: &str) -> Result<Var> {
    let p = params.scope(prefix);
    let shape = tape.value(u).shape().to_vec();
    if shape.len() != 3 || shape[2] != cfg.d_inner() {
        return Err(MaatError::Dimension(format!(
            "scan input {:?} does not match d_inner {}",
            shape,
            cfg.d_inner()
        )));
    }
    let (n, r) = (cfg.d_state, cfg.dt_rank());
    let proj = tape.matmul(u, p.var("x_w")?)?;
    let dt = tape.slice_last(proj, 0, r)?;
    let b = tape.slice_last(proj, r, n)?;
    let c = tape.slice_last(proj, r + n, n)?;
    let dt = tape.linear(dt, p.var("dt_w")?, Some(p.var("dt_b")?))?;
    let delta = tape.softplus(dt)?;
    let a = tape.softplus(p.var("a_raw")?)?;
    let a = tape.scale(a, -1.0)?;
    tape.selective_scan(u, delta, a, b, c, p.var("d")?)
}

/// Full block over `x: [B, L, d_model]`; output has the input's shape.
pub fn mamba_block(tape: &mut Tape, x: Var, cfg: &SsmConfig, params: &BoundParams, prefix: &str) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 || shape[2] != cfg.d_model {
        return Err(MaatError::Dimension(format!(
            "ssm input {:?} does not match d_model {}",
            shape, cfg.d_model
        )));
    }
    let p = params.scope(prefix);
    let e = cfg.d_inner();
    let xz = tape.matmul(x, p.var("in_w")?)?;
    let x_in = tape.slice_last(xz, 0, e)?;
    let z = tape.slice_last(xz, e, e)?;
    let conv = tape.causal_conv(x_in, p.var("conv_w")?, p.var("conv_b")?)?;
    let u = tape.silu(conv)?;
    let y = selective_scan(tape, u, cfg, params, prefix)?;
    let gate = tape.silu(z)?;
    let y = tape.mul(y, gate)?;
    tape.matmul(y, p.var("out_w")?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::grad_check;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn block(cfg: &SsmConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init_params(&mut store, "ssm", cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        store
    }

    fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn discretize_examples() {
        let (abar, bbar) = discretize(&scalar(0.0), &scalar(2.0), &scalar(0.3)).unwrap();
        assert_eq!(abar.data(), &[1.0]);
        assert!((bbar.data()[0] - 0.6).abs() < 1e-15);
        let (abar, _) = discretize(&scalar(-1.0), &scalar(1.0), &scalar(std::f64::consts::LN_2)).unwrap();
        assert!((abar.data()[0] - 0.5).abs() < 1e-15);
        let (abar, bbar) = discretize(&scalar(-3.0), &scalar(5.0), &scalar(1e-12)).unwrap();
        assert!((abar.data()[0] - 1.0).abs() < 1e-11 && bbar.data()[0].abs() < 1e-11);
        assert!(matches!(
            discretize(&scalar(-1.0), &scalar(1.0), &scalar(0.0)),
            Err(MaatError::Parameter(_))
        ));
    }

    #[test]
    fn inverse_softplus_round_trip() {
        for y in [1e-3, 0.5, 1.0, 16.0] {
            let x = inverse_softplus(y);
            assert!((x.max(0.0) + (-x.abs()).exp().ln_1p() - y).abs() < 1e-12);
        }
    }

    fn run_scan(cfg: &SsmConfig, store: &ParamStore, u: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false).unwrap();
        let uv = tape.constant(u.clone()).unwrap();
        let y = selective_scan(&mut tape, uv, cfg, &bound, "ssm").unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn zero_input_zero_output() {
        let cfg = SsmConfig {
            d_model: 4,
            d_state: 3,
            ..SsmConfig::default()
        };
        let y = run_scan(&cfg, &block(&cfg, 1), &Tensor::zeros(&[2, 5, cfg.d_inner()]));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_formula() {
        let cfg = SsmConfig {
            d_model: 2,
            d_state: 2,
            ..SsmConfig::default()
        };
        let store = block(&cfg, 2);
        let u = random(&[1, 1, cfg.d_inner()], 3);
        let y = run_scan(&cfg, &store, &u);
        // h_1 = delta B u (h_0 = 0), y = C h_1 + D u
        let e = cfg.d_inner();
        let (r, n) = (cfg.dt_rank(), cfg.d_state);
        let xw = store.get("ssm.x_w").unwrap();
        let proj: Vec<f64> = (0..r + 2 * n)
            .map(|j| (0..e).map(|i| u.data()[i] * xw.get(&[i, j])).sum())
            .collect();
        for ch in 0..e {
            let dt_lin: f64 = (0..r)
                .map(|k| proj[k] * store.get("ssm.dt_w").unwrap().get(&[k, ch]))
                .sum::<f64>()
                + store.get("ssm.dt_b").unwrap().data()[ch];
            let delta = dt_lin.max(0.0) + (-dt_lin.abs()).exp().ln_1p();
            let want: f64 = (0..n)
                .map(|s| proj[r + n + s] * delta * proj[r + s] * u.data()[ch])
                .sum::<f64>()
                + store.get("ssm.d").unwrap().data()[ch] * u.data()[ch];
            assert!((y.data()[ch] - want).abs() < 1e-12);
        }
    }

    /// Per-step recurrence written directly from the definitions, using
    /// `discretize` for each state coordinate.
    fn naive_scan(cfg: &SsmConfig, store: &ParamStore, u: &Tensor) -> Vec<f64> {
        let (len, e, n, r) = (u.shape()[1], cfg.d_inner(), cfg.d_state, cfg.dt_rank());
        let get = |name: &str| store.get(&format!("ssm.{name}")).unwrap().clone();
        let (xw, dtw, dtb, a_raw, dd) = (get("x_w"), get("dt_w"), get("dt_b"), get("a_raw"), get("d"));
        let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
        let mut h = vec![0.0; e * n];
        let mut out = Vec::new();
        for t in 0..len {
            let ut: Vec<f64> = (0..e).map(|i| u.get(&[0, t, i])).collect();
            let proj: Vec<f64> = (0..r + 2 * n)
                .map(|j| (0..e).map(|i| ut[i] * xw.get(&[i, j])).sum())
                .collect();
            for ch in 0..e {
                let delta = softplus((0..r).map(|k| proj[k] * dtw.get(&[k, ch])).sum::<f64>() + dtb.data()[ch]);
                let mut y = dd.data()[ch] * ut[ch];
                for s in 0..n {
                    let a = Tensor::scalar(-softplus(a_raw.get(&[ch, s])));
                    let (abar, bbar) = discretize(&a, &Tensor::scalar(proj[r + s]), &Tensor::scalar(delta)).unwrap();
                    h[ch * n + s] = abar.data()[0] * h[ch * n + s] + bbar.data()[0] * ut[ch];
                    y += proj[r + n + s] * h[ch * n + s];
                }
                out.push(y);
            }
        }
        out
    }

    #[test]
    fn scan_matches_sequential_oracle() {
        for (seed, len) in [(20u64, 12usize), (21, 1), (22, 64)] {
            let cfg = SsmConfig {
                d_model: 3,
                d_state: 4,
                ..SsmConfig::default()
            };
            let store = block(&cfg, seed);
            let u = random(&[1, len, cfg.d_inner()], seed + 100);
            let y = run_scan(&cfg, &store, &u);
            let want = naive_scan(&cfg, &store, &u);
            let err = y
                .data()
                .iter()
                .zip(&want)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-10, "len {len}: {err}");
        }
    }

    #[test]
    fn shape_contract_and_dimension_error() {
        let cfg = SsmConfig {
            d_model: 8,
            d_state: 4,
            ..SsmConfig::default()
        };
        let store = block(&cfg, 4);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false).unwrap();
        let x = tape.constant(random(&[2, 16, 8], 5)).unwrap();
        let y = mamba_block(&mut tape, x, &cfg, &bound, "ssm").unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 16, 8]);
        let bad = tape.constant(random(&[2, 16, 6], 6)).unwrap();
        assert!(matches!(
            mamba_block(&mut tape, bad, &cfg, &bound, "ssm"),
            Err(MaatError::Dimension(_))
        ));
    }

    #[test]
    fn perturbing_the_future_leaves_the_past_bitwise_unchanged() {
        let cfg = SsmConfig {
            d_model: 8,
            d_state: 4,
            ..SsmConfig::default()
        };
        let store = block(&cfg, 7);
        let x = random(&[1, 16, 8], 8);
        let mut xp = x.clone();
        for c in 0..8 {
            xp.data_mut()[10 * 8 + c] += 0.75;
        }
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, false).unwrap();
            let xv = tape.constant(x.clone()).unwrap();
            let y = mamba_block(&mut tape, xv, &cfg, &bound, "ssm").unwrap();
            tape.value(y).clone()
        };
        let (y, yp) = (run(&x), run(&xp));
        assert_eq!(&y.data()[..10 * 8], &yp.data()[..10 * 8]);
        assert_ne!(&y.data()[10 * 8..11 * 8], &yp.data()[10 * 8..11 * 8]);
    }

    #[test]
    fn long_sequence_state_stays_bounded() {
        let cfg = SsmConfig {
            d_model: 2,
            d_state: 4,
            ..SsmConfig::default()
        };
        let store = block(&cfg, 9);
        let len = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let u = Tensor::new(
            vec![1, len, cfg.d_inner()],
            (0..len * cfg.d_inner()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let y = run_scan(&cfg, &store, &u);
        let late = y.data()[(len - 100) * cfg.d_inner()..]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(y.is_finite() && late < 1e3, "max |y| over the tail = {late}");
    }

    #[test]
    fn block_gradient_passes_check() {
        let cfg = SsmConfig {
            d_model: 4,
            d_state: 3,
            d_conv: 3,
            expand: 2,
        };
        let store = block(&cfg, 11);
        let x = random(&[1, 6, 4], 12);
        let err = grad_check(
            |t, xv| {
                let bound = store.bind(t, false)?;
                let y = mamba_block(t, xv, &cfg, &bound, "ssm")?;
                t.sum(y)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
