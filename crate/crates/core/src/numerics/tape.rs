//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the tape, so node order is a topological
//! order by construction. [`Tape::backward`] walks the nodes once, in reverse,
//! from a scalar root.

use std::rc::Rc;

use super::tensor::{matmul_into, moments, Tensor, LAYER_NORM_EPS};
use crate::error::{MaatError, Result};

/// Floor added inside the logarithms of the association discrepancy.
pub const KL_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Sigmoid(Var),
    Softplus(Var),
    Silu(Var),
    Gelu(Var),
    Exp(Var),
    Abs(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    ConcatLast(Vec<Var>),
    SliceLast {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    HeadScores {
        q: Var,
        k: Var,
        heads: usize,
        scale: f64,
        mask: Option<Rc<[bool]>>,
    },
    HeadApply {
        s: Var,
        v: Var,
        heads: usize,
    },
    GaussianPrior(Var),
    SymKl(Var, Var),
    CausalConv {
        x: Var,
        w: Var,
        b: Var,
    },
    SelectiveScan {
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        states: Vec<f64>,
    },
    MulConst(Var, Vec<f64>),
}

/// Gradients of a scalar root with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Raw gradient buffer, or `None` when no gradient reached `v`.
    pub fn data(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when no gradient reached `v`.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.data(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.data(v).is_some()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rows(t: &Tensor) -> usize {
    let d = t.last_dim();
    if d == 0 {
        0
    } else {
        t.len() / d
    }
}

fn dim_err(msg: String) -> MaatError {
    MaatError::Dimension(msg)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn head_dims(q: &Tensor, heads: usize) -> Result<(usize, usize, usize, usize)> {
    if q.ndim() != 3 {
        return Err(dim_err(format!("expected [B,N,D], got {:?}", q.shape())));
    }
    let (b, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    if heads == 0 || d % heads != 0 {
        return Err(dim_err(format!("width {d} not divisible into {heads} heads")));
    }
    Ok((b, n, d, d / heads))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(MaatError::NonFinite(name));
        }
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A differentiable leaf (parameter or input under study).
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "param")
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Stop-gradient: same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let tracked = self.tracked(&[a, b]);
        self.push(value, op, tracked, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let value = self.value(a).map(f);
        let tracked = self.tracked(&[a]);
        self.push(value, op, tracked, name)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| c * x, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x + c, Op::AddScalar(a), "add_scalar")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid_scalar, Op::Sigmoid(a), "sigmoid")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, softplus_scalar, Op::Softplus(a), "softplus")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * sigmoid_scalar(x), Op::Silu(a), "silu")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, gelu, Op::Gelu(a), "gelu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a), "exp")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs(a), "abs")
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_const(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(a).len() {
            return Err(dim_err("mul_const factor count".into()));
        }
        let t = self.value(a);
        let data = t.data().iter().zip(&factors).map(|(x, f)| x * f).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let tracked = self.tracked(&[a]);
        self.push(value, Op::MulConst(a, factors), tracked, "mul_const")
    }

    /// `x[.., n] + bias[n]`
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.last_dim();
        if tb.shape() != [n] {
            return Err(dim_err(format!("bias {:?} vs last extent {n}", tb.shape())));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let tracked = self.tracked(&[x, bias]);
        self.push(value, Op::AddBias(x, bias), tracked, "add_bias")
    }

    /// `[.., k] x [k, n] -> [.., n]`
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let value = super::tensor::matmul(self.value(a), self.value(w))?;
        let tracked = self.tracked(&[a, w]);
        self.push(value, Op::MatMul(a, w), tracked, "matmul")
    }

    /// `x W + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let value = super::tensor::layer_norm(self.value(x), self.value(gamma), self.value(beta), LAYER_NORM_EPS)?;
        let tx = self.value(x);
        let d = tx.last_dim();
        let mut xhat = Vec::with_capacity(tx.len());
        let mut rstd = Vec::with_capacity(rows(tx));
        for row in tx.data().chunks(d) {
            let (mean, r) = moments(row, LAYER_NORM_EPS);
            xhat.extend(row.iter().map(|v| (v - mean) * r));
            rstd.push(r);
        }
        let tracked = self.tracked(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            tracked,
            "layer_norm",
        )
    }

    /// Softmax along the last axis; see [`super::softmax_rows`] for the mask convention.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let value = super::tensor::softmax_rows(self.value(a), mask)?;
        let tracked = self.tracked(&[a]);
        self.push(value, Op::Softmax(a), tracked, "softmax_rows")
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| dim_err("concat of nothing".into()))?);
        if first.ndim() == 0 {
            return Err(dim_err("concat of a scalar".into()));
        }
        let lead = first.shape()[..first.ndim() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.ndim() != lead.len() + 1 || t.shape()[..lead.len()] != lead[..] {
                return Err(dim_err(format!("concat {:?} vs {:?}", t.shape(), first.shape())));
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let nrows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(nrows * total);
        for row in 0..nrows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[row * w..(row + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        let tracked = self.tracked(parts);
        self.push(value, Op::ConcatLast(parts.to_vec()), tracked, "concat_last")
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        if start + len > n {
            return Err(dim_err(format!("slice {start}..{} of extent {n}", start + len)));
        }
        let mut data = Vec::with_capacity(rows(t) * len);
        for row in t.data().chunks(n.max(1)) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        let value = Tensor::new(shape, data)?;
        let tracked = self.tracked(&[x]);
        self.push(value, Op::SliceLast { x, start }, tracked, "slice_last")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Reshape(x), tracked, "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Sum(x), tracked, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(dim_err("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Mean(x), tracked, "mean")
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Per-head scaled dot products: `q, k: [B,N,D]` -> `[B,H,N,N]`.
    ///
    /// With a `[N,N]` mask, excluded pairs are left at 0 and never computed.
    pub fn head_scores(&mut self, q: Var, k: Var, heads: usize, scale: f64, mask: Option<Rc<[bool]>>) -> Result<Var> {
        self.same_shape(q, k, "head_scores")?;
        let (tq, tk) = (self.value(q), self.value(k));
        let (bsz, n, d, dh) = head_dims(tq, heads)?;
        if let Some(m) = &mask {
            if m.len() != n * n {
                return Err(dim_err(format!("score mask length {} for N={n}", m.len())));
            }
        }
        let mut out = vec![0.0; bsz * heads * n * n];
        for b in 0..bsz {
            for h in 0..heads {
                for i in 0..n {
                    let qi = &tq.data()[(b * n + i) * d + h * dh..][..dh];
                    let orow = &mut out[((b * heads + h) * n + i) * n..][..n];
                    for (j, o) in orow.iter_mut().enumerate() {
                        if mask.as_ref().is_some_and(|m| !m[i * n + j]) {
                            continue;
                        }
                        let kj = &tk.data()[(b * n + j) * d + h * dh..][..dh];
                        *o = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
        }
        let value = Tensor::new(vec![bsz, heads, n, n], out)?;
        let tracked = self.tracked(&[q, k]);
        self.push(
            value,
            Op::HeadScores {
                q,
                k,
                heads,
                scale,
                mask,
            },
            tracked,
            "head_scores",
        )
    }

    /// Applies per-head row weights to values: `s: [B,H,N,N]`, `v: [B,N,D]` -> `[B,N,D]`.
    pub fn head_apply(&mut self, s: Var, v: Var) -> Result<Var> {
        let (ts, tv) = (self.value(s), self.value(v));
        if ts.ndim() != 4 {
            return Err(dim_err(format!("head_apply weights {:?}", ts.shape())));
        }
        let heads = ts.shape()[1];
        let (bsz, n, d, dh) = head_dims(tv, heads)?;
        if ts.shape() != [bsz, heads, n, n] {
            return Err(dim_err(format!(
                "head_apply {:?} vs values {:?}",
                ts.shape(),
                tv.shape()
            )));
        }
        let mut out = vec![0.0; bsz * n * d];
        for b in 0..bsz {
            for h in 0..heads {
                for i in 0..n {
                    let srow = &ts.data()[((b * heads + h) * n + i) * n..][..n];
                    let orow = &mut out[(b * n + i) * d + h * dh..][..dh];
                    for (j, &w) in srow.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let vj = &tv.data()[(b * n + j) * d + h * dh..][..dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![bsz, n, d], out)?;
        let tracked = self.tracked(&[s, v]);
        self.push(value, Op::HeadApply { s, v, heads }, tracked, "head_apply")
    }

    /// Row-normalized Gaussian kernel over temporal distance.
    ///
    /// `sigma: [B,N,H]` (one scale per position and head) -> `[B,H,N,N]` with
    /// `P[b,h,i,j] ∝ exp(-(i-j)^2 / (2 sigma[b,i,h]^2))`.
    pub fn gaussian_prior(&mut self, sigma: Var) -> Result<Var> {
        let t = self.value(sigma);
        if t.ndim() != 3 {
            return Err(dim_err(format!("sigma must be [B,N,H], got {:?}", t.shape())));
        }
        if let Some(bad) = t.data().iter().find(|&&s| s <= 0.0 || s.is_nan()) {
            return Err(MaatError::Parameter(format!("prior scale must be positive, got {bad}")));
        }
        let value = super::gaussian_prior_value(t);
        let tracked = self.tracked(&[sigma]);
        self.push(value, Op::GaussianPrior(sigma), tracked, "gaussian_prior")
    }

    /// Head-averaged symmetric KL between matching rows of `p` and `s`.
    ///
    /// `p, s: [B,H,N,N]` -> `[B,N]`.
    pub fn sym_kl(&mut self, p: Var, s: Var) -> Result<Var> {
        self.same_shape(p, s, "sym_kl")?;
        let value = super::sym_kl_value(self.value(p), self.value(s))?;
        let tracked = self.tracked(&[p, s]);
        self.push(value, Op::SymKl(p, s), tracked, "sym_kl")
    }

    /// Depthwise causal convolution along time: `x: [B,L,C]`, `w: [C,K]`, `b: [C]`.
    ///
    /// `y[t] = b + sum_k w[k] * x[t - (K-1) + k]`, zero-padded on the left.
    pub fn causal_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.ndim() != 3 || tw.ndim() != 2 {
            return Err(dim_err(format!(
                "causal_conv {:?} with kernel {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let (bsz, len, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let kw = tw.shape()[1];
        if tw.shape()[0] != c || tb.shape() != [c] || kw == 0 {
            return Err(dim_err(format!(
                "causal_conv channels {c}, kernel {:?}, bias {:?}",
                tw.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; tx.len()];
        for bi in 0..bsz {
            for t in 0..len {
                for ch in 0..c {
                    let mut acc = tb.data()[ch];
                    for k in 0..kw {
                        let src = t as isize + k as isize - (kw as isize - 1);
                        if src >= 0 {
                            acc += tw.data()[ch * kw + k] * tx.data()[(bi * len + src as usize) * c + ch];
                        }
                    }
                    out[(bi * len + t) * c + ch] = acc;
                }
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let tracked = self.tracked(&[x, w, b]);
        self.push(value, Op::CausalConv { x, w, b }, tracked, "causal_conv")
    }

    /// Input-dependent linear recurrence (selective scan).
    ///
    /// Shapes: `u, delta: [B,L,E]`, `a: [E,N]`, `b, c: [B,L,N]`, `d: [E]`.
    /// `h_t = exp(delta_t a) * h_{t-1} + delta_t b_t u_t`, `y_t = c_t . h_t + d u_t`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let (y, states) = super::scan_forward(
            self.value(u),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(c),
            self.value(d),
        )?;
        let tracked = self.tracked(&[u, delta, a, b, c, d]);
        self.push(
            y,
            Op::SelectiveScan {
                u,
                delta,
                a,
                b,
                c,
                d,
                states,
            },
            tracked,
            "selective_scan",
        )
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(MaatError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
        if let Some(s) = self.slot(grads, v) {
            for (i, x) in s.iter_mut().enumerate() {
                *x += f(i);
            }
        }
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |i| g[i]);
                self.accumulate(grads, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |i| g[i]);
                self.accumulate(grads, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.accumulate(grads, *a, |i| g[i] * vb[i]);
                self.accumulate(grads, *b, |i| g[i] * va[i]);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |i| c * g[i]),
            Op::AddScalar(a) => self.accumulate(grads, *a, |i| g[i]),
            Op::MulConst(a, f) => self.accumulate(grads, *a, |i| g[i] * f[i]),
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, |i| g[i]);
                if let Some(gb) = self.slot(grads, *b) {
                    let n = gb.len();
                    for row in g.chunks(n.max(1)) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::MatMul(a, w) => {
                let (ta, tw) = (&self.nodes[a.0].value, &self.nodes[w.0].value);
                let (k, n) = (tw.shape()[0], tw.shape()[1]);
                let m = rows(ta);
                if let Some(ga) = self.slot(grads, *a) {
                    // ga[i,p] += sum_j g[i,j] w[p,j]
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let wrow = &tw.data()[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(wrow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    // gw[p,j] += sum_i a[i,p] g[i,j]
                    let at = transpose(ta.data(), m, k);
                    matmul_into(&at, g, gw, k, m, n);
                }
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, |i| g[i] * out[i] * (1.0 - out[i])),
            Op::Softplus(a) => {
                let va = val(*a);
                self.accumulate(grads, *a, |i| g[i] * sigmoid_scalar(va[i]));
            }
            Op::Silu(a) => {
                let va = val(*a);
                self.accumulate(grads, *a, |i| {
                    let s = sigmoid_scalar(va[i]);
                    g[i] * (s + va[i] * s * (1.0 - s))
                });
            }
            Op::Gelu(a) => {
                let va = val(*a);
                self.accumulate(grads, *a, |i| g[i] * gelu_grad(va[i]));
            }
            Op::Exp(a) => self.accumulate(grads, *a, |i| g[i] * out[i]),
            Op::Abs(a) => {
                let va = val(*a);
                self.accumulate(grads, *a, |i| g[i] * sign(va[i]));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gam = val(*gamma);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * xrow[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += grow[j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let dn = d as f64;
                    for (r, (grow, xrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = grow[j] * gam[j];
                            m1 += dxh;
                            m2 += dxh * xrow[j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            let dxh = grow[j] * gam[j];
                            gx[r * d + j] += rstd[r] * (dxh - m1 - xrow[j] * m2);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let n = node.value.last_dim();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((grow, yrow), arow) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = grow
                            .iter()
                            .zip(yrow)
                            .filter(|(_, &y)| y != 0.0)
                            .map(|(g, y)| g * y)
                            .sum();
                        for j in 0..n {
                            if yrow[j] != 0.0 {
                                arow[j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.last_dim();
                    if let Some(gp) = self.slot(grads, p) {
                        for (r, grow) in g.chunks(total.max(1)).enumerate() {
                            for j in 0..w {
                                gp[r * w + j] += grow[offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceLast { x, start } => {
                let len = node.value.last_dim();
                let n = self.nodes[x.0].value.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, grow) in g.chunks(len.max(1)).enumerate() {
                        for j in 0..len {
                            gx[r * n + start + j] += grow[j];
                        }
                    }
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |i| g[i]),
            Op::Sum(a) => self.accumulate(grads, *a, |_| g[0]),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                self.accumulate(grads, *a, |_| g[0] / n);
            }
            Op::HeadScores {
                q,
                k,
                heads,
                scale,
                mask,
            } => {
                let (tq, tk) = (&self.nodes[q.0].value, &self.nodes[k.0].value);
                let (bsz, n, d, dh) = head_dims(tq, *heads).expect("checked in forward");
                let keep = |i: usize, j: usize| mask.as_ref().is_none_or(|m| m[i * n + j]);
                if let Some(gq) = self.slot(grads, *q) {
                    for b in 0..bsz {
                        for h in 0..*heads {
                            for i in 0..n {
                                let grow = &g[((b * heads + h) * n + i) * n..][..n];
                                let gqi = &mut gq[(b * n + i) * d + h * dh..][..dh];
                                for (j, &gv) in grow.iter().enumerate() {
                                    if gv == 0.0 || !keep(i, j) {
                                        continue;
                                    }
                                    let kj = &tk.data()[(b * n + j) * d + h * dh..][..dh];
                                    for (acc, x) in gqi.iter_mut().zip(kj) {
                                        *acc += scale * gv * x;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gk) = self.slot(grads, *k) {
                    for b in 0..bsz {
                        for h in 0..*heads {
                            for i in 0..n {
                                let grow = &g[((b * heads + h) * n + i) * n..][..n];
                                let qi = &tq.data()[(b * n + i) * d + h * dh..][..dh];
                                for (j, &gv) in grow.iter().enumerate() {
                                    if gv == 0.0 || !keep(i, j) {
                                        continue;
                                    }
                                    let gkj = &mut gk[(b * n + j) * d + h * dh..][..dh];
                                    for (acc, x) in gkj.iter_mut().zip(qi) {
                                        *acc += scale * gv * x;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::HeadApply { s, v, heads } => {
                let (ts, tv) = (&self.nodes[s.0].value, &self.nodes[v.0].value);
                let (bsz, n, d, dh) = head_dims(tv, *heads).expect("checked in forward");
                if let Some(gs) = self.slot(grads, *s) {
                    for b in 0..bsz {
                        for h in 0..*heads {
                            for i in 0..n {
                                let gi = &g[(b * n + i) * d + h * dh..][..dh];
                                for j in 0..n {
                                    let vj = &tv.data()[(b * n + j) * d + h * dh..][..dh];
                                    gs[((b * heads + h) * n + i) * n + j] +=
                                        gi.iter().zip(vj).map(|(x, y)| x * y).sum::<f64>();
                                }
                            }
                        }
                    }
                }
                if let Some(gv) = self.slot(grads, *v) {
                    for b in 0..bsz {
                        for h in 0..*heads {
                            for i in 0..n {
                                let srow = &ts.data()[((b * heads + h) * n + i) * n..][..n];
                                let gi = &g[(b * n + i) * d + h * dh..][..dh];
                                for (j, &w) in srow.iter().enumerate() {
                                    if w == 0.0 {
                                        continue;
                                    }
                                    let gvj = &mut gv[(b * n + j) * d + h * dh..][..dh];
                                    for (acc, x) in gvj.iter_mut().zip(gi) {
                                        *acc += w * x;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::GaussianPrior(sigma) => {
                let ts = &self.nodes[sigma.0].value;
                let (bsz, n, heads) = (ts.shape()[0], ts.shape()[1], ts.shape()[2]);
                if let Some(gs) = self.slot(grads, *sigma) {
                    for b in 0..bsz {
                        for h in 0..heads {
                            for i in 0..n {
                                let s = ts.data()[(b * n + i) * heads + h];
                                let prow = &out[((b * heads + h) * n + i) * n..][..n];
                                let grow = &g[((b * heads + h) * n + i) * n..][..n];
                                let d2 = |j: usize| (i as f64 - j as f64).powi(2);
                                let mean_d2: f64 = (0..n).map(|j| prow[j] * d2(j)).sum();
                                let acc: f64 = (0..n).map(|j| grow[j] * prow[j] * (d2(j) - mean_d2)).sum();
                                gs[(b * n + i) * heads + h] += acc / (s * s * s);
                            }
                        }
                    }
                }
            }
            Op::SymKl(p, s) => {
                let (tp, ts) = (&self.nodes[p.0].value, &self.nodes[s.0].value);
                let sh = tp.shape();
                let (heads, n, m) = (sh[1], sh[2], sh[3]);
                let inv_h = 1.0 / heads as f64;
                let coef = |idx: usize| {
                    let b = idx / (heads * n * m);
                    let i = (idx / m) % n;
                    g[b * n + i] * inv_h
                };
                let (pd, sd) = (tp.data(), ts.data());
                self.accumulate(grads, *p, |idx| {
                    let (pv, sv) = (pd[idx], sd[idx]);
                    let l = (pv + KL_FLOOR).ln() - (sv + KL_FLOOR).ln();
                    coef(idx) * (l + (pv - sv) / (pv + KL_FLOOR))
                });
                self.accumulate(grads, *s, |idx| {
                    let (pv, sv) = (pd[idx], sd[idx]);
                    let l = (pv + KL_FLOOR).ln() - (sv + KL_FLOOR).ln();
                    coef(idx) * (-l - (pv - sv) / (sv + KL_FLOOR))
                });
            }
            Op::CausalConv { x, w, b } => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (bsz, len, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let kw = tw.shape()[1];
                let src = |t: usize, k: usize| {
                    let s = t as isize + k as isize - (kw as isize - 1);
                    (s >= 0).then_some(s as usize)
                };
                if let Some(gb) = self.slot(grads, *b) {
                    for row in g.chunks(c) {
                        for ch in 0..c {
                            gb[ch] += row[ch];
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    for bi in 0..bsz {
                        for t in 0..len {
                            for k in 0..kw {
                                if let Some(s) = src(t, k) {
                                    for ch in 0..c {
                                        gw[ch * kw + k] +=
                                            g[(bi * len + t) * c + ch] * tx.data()[(bi * len + s) * c + ch];
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for bi in 0..bsz {
                        for t in 0..len {
                            for k in 0..kw {
                                if let Some(s) = src(t, k) {
                                    for ch in 0..c {
                                        gx[(bi * len + s) * c + ch] +=
                                            g[(bi * len + t) * c + ch] * tw.data()[ch * kw + k];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::SelectiveScan {
                u,
                delta,
                a,
                b,
                c,
                d,
                states,
            } => {
                let sg = super::scan_backward(
                    g,
                    states,
                    &self.nodes[u.0].value,
                    &self.nodes[delta.0].value,
                    &self.nodes[a.0].value,
                    &self.nodes[b.0].value,
                    &self.nodes[c.0].value,
                    &self.nodes[d.0].value,
                );
                self.accumulate(grads, *u, |i| sg.u[i]);
                self.accumulate(grads, *delta, |i| sg.delta[i]);
                self.accumulate(grads, *a, |i| sg.a[i]);
                self.accumulate(grads, *b, |i| sg.b[i]);
                self.accumulate(grads, *c, |i| sg.c[i]);
                self.accumulate(grads, *d, |i| sg.d[i]);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn transpose(a: &[f64], m: usize, k: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..m {
        for p in 0..k {
            t[p * m + i] = a[i * k + p];
        }
    }
    t
}
