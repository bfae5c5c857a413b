//! Fused forward/backward kernels for the attention prior, the discrepancy,
//! and the selective scan.

use super::tape::KL_FLOOR;
use super::tensor::Tensor;
use crate::error::{MaatError, Result};

/// `sigma: [B,N,H]` -> row-normalized Gaussian kernel `[B,H,N,N]`.
pub fn gaussian_prior_value(sigma: &Tensor) -> Tensor {
    let (bsz, n, heads) = (sigma.shape()[0], sigma.shape()[1], sigma.shape()[2]);
    let mut out = vec![0.0; bsz * heads * n * n];
    for b in 0..bsz {
        for h in 0..heads {
            for i in 0..n {
                let s = sigma.data()[(b * n + i) * heads + h];
                let row = &mut out[((b * heads + h) * n + i) * n..][..n];
                let mut total = 0.0;
                for (j, v) in row.iter_mut().enumerate() {
                    let dist = i as f64 - j as f64;
                    *v = (-dist * dist / (2.0 * s * s)).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
        }
    }
    Tensor::new(vec![bsz, heads, n, n], out).expect("prior shape")
}

/// Head-averaged symmetric KL between matching rows: `[B,H,N,M]` x2 -> `[B,N]`.
///
/// Each term is `(p - s)(ln(p + floor) - ln(s + floor))`, which is the sum of
/// both KL directions and is non-negative term by term.
pub fn sym_kl_value(p: &Tensor, s: &Tensor) -> Result<Tensor> {
    if p.shape() != s.shape() || p.ndim() != 4 {
        return Err(MaatError::Dimension(format!(
            "sym_kl expects two [B,H,N,M] maps, got {:?} and {:?}",
            p.shape(),
            s.shape()
        )));
    }
    let (bsz, heads, n, m) = (p.shape()[0], p.shape()[1], p.shape()[2], p.shape()[3]);
    let mut out = vec![0.0; bsz * n];
    for b in 0..bsz {
        for h in 0..heads {
            for i in 0..n {
                let off = ((b * heads + h) * n + i) * m;
                let (pr, sr) = (&p.data()[off..off + m], &s.data()[off..off + m]);
                let kl: f64 = pr
                    .iter()
                    .zip(sr)
                    .map(|(&pv, &sv)| (pv - sv) * ((pv + KL_FLOOR).ln() - (sv + KL_FLOOR).ln()))
                    .sum();
                out[b * n + i] += kl / heads as f64;
            }
        }
    }
    Tensor::new(vec![bsz, n], out)
}

struct ScanDims {
    bsz: usize,
    len: usize,
    inner: usize,
    state: usize,
}

fn scan_dims(u: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Result<ScanDims> {
    if u.ndim() != 3 || a.ndim() != 2 {
        return Err(MaatError::Dimension(format!(
            "selective_scan expects u [B,L,E] and A [E,N], got {:?} and {:?}",
            u.shape(),
            a.shape()
        )));
    }
    let (bsz, len, inner) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let state = a.shape()[1];
    let ok = delta.shape() == u.shape()
        && a.shape()[0] == inner
        && b.shape() == [bsz, len, state]
        && c.shape() == [bsz, len, state]
        && d.shape() == [inner];
    if !ok {
        return Err(MaatError::Dimension(format!(
            "selective_scan shapes: u {:?}, delta {:?}, A {:?}, B {:?}, C {:?}, D {:?}",
            u.shape(),
            delta.shape(),
            a.shape(),
            b.shape(),
            c.shape(),
            d.shape()
        )));
    }
    Ok(ScanDims { bsz, len, inner, state })
}

/// Sequential selective scan. Returns the output `[B,L,E]` and every hidden
/// state `[B,L,E,N]` (kept for the reverse pass).
pub fn scan_forward(
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    let ScanDims { bsz, len, inner, state } = scan_dims(u, delta, a, b, c, d)?;
    if let Some(bad) = delta.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
        return Err(MaatError::Parameter(format!("step size must be positive, got {bad}")));
    }
    let mut y = vec![0.0; u.len()];
    let mut states = vec![0.0; bsz * len * inner * state];
    let mut h = vec![0.0; inner * state];
    for bi in 0..bsz {
        h.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..len {
            let row = bi * len + t;
            let brow = &b.data()[row * state..][..state];
            let crow = &c.data()[row * state..][..state];
            for e in 0..inner {
                let ut = u.data()[row * inner + e];
                let dt = delta.data()[row * inner + e];
                let hrow = &mut h[e * state..(e + 1) * state];
                let mut acc = 0.0;
                for n in 0..state {
                    let abar = (dt * a.data()[e * state + n]).exp();
                    hrow[n] = abar * hrow[n] + dt * brow[n] * ut;
                    acc += crow[n] * hrow[n];
                }
                y[row * inner + e] = acc + d.data()[e] * ut;
                states[(row * inner + e) * state..][..state].copy_from_slice(hrow);
            }
        }
    }
    Ok((Tensor::new(u.shape().to_vec(), y)?, states))
}

pub(crate) struct ScanGrads {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward(
    gy: &[f64],
    states: &[f64],
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
) -> ScanGrads {
    let ScanDims { bsz, len, inner, state } = scan_dims(u, delta, a, b, c, d).expect("checked in forward");
    let mut g = ScanGrads {
        u: vec![0.0; u.len()],
        delta: vec![0.0; delta.len()],
        a: vec![0.0; a.len()],
        b: vec![0.0; b.len()],
        c: vec![0.0; c.len()],
        d: vec![0.0; d.len()],
    };
    // carry[e,n]: gradient reaching h_t from h_{t+1}
    let mut carry = vec![0.0; inner * state];
    for bi in 0..bsz {
        carry.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..len).rev() {
            let row = bi * len + t;
            for e in 0..inner {
                let idx = row * inner + e;
                let (ut, dt, gyt) = (u.data()[idx], delta.data()[idx], gy[idx]);
                g.d[e] += gyt * ut;
                g.u[idx] += gyt * d.data()[e];
                let h_now = &states[idx * state..][..state];
                let h_prev = (t > 0).then(|| &states[(idx - inner) * state..][..state]);
                for n in 0..state {
                    let an = a.data()[e * state + n];
                    let bn = b.data()[row * state + n];
                    let cn = c.data()[row * state + n];
                    g.c[row * state + n] += gyt * h_now[n];
                    let total = cn * gyt + carry[e * state + n];
                    let abar = (dt * an).exp();
                    let hp = h_prev.map_or(0.0, |h| h[n]);
                    let g_abar = total * hp;
                    g.delta[idx] += g_abar * abar * an + total * bn * ut;
                    g.a[e * state + n] += g_abar * abar * dt;
                    g.b[row * state + n] += total * dt * ut;
                    g.u[idx] += total * dt * bn;
                    carry[e * state + n] = abar * total;
                }
            }
        }
    }
    g
}
