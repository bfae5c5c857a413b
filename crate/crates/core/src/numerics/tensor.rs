use std::fmt;

use crate::error::{MaatError, Result};

/// Dense row-major array of `f64`.
///
/// A `Tensor` is a plain value. Differentiation happens on a [`Tape`](super::Tape),
/// which owns tensors and hands out [`Var`](super::Var) references to them.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(MaatError::Dimension(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MaatError::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(MaatError::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            assert!(i < n, "index {i} out of bounds for extent {n}");
            acc * n + i
        })
    }

    /// Splits the leading axis off: returns the `i`-th sub-tensor.
    pub fn outer(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| MaatError::Dimension("cannot stack zero tensors".into()))?;
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(parts.len() * first.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(MaatError::Dimension(format!(
                    "stack: {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
            data.extend_from_slice(&p.data);
        }
        Tensor::new(shape, data)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?}[{}, {}, ... {} values]",
                self.shape,
                self.data[0],
                self.data[1],
                self.data.len()
            )
        }
    }
}

/// Matrix product over the last axis of `a` and the first axis of a 2-D `b`.
///
/// `a` may carry leading batch axes: `[.., k] x [k, n] -> [.., n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() < 1 || b.ndim() != 2 {
        return Err(MaatError::Dimension(format!(
            "matmul expects [..,k] x [k,n], got {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let k = a.last_dim();
    if k != b.shape[0] {
        return Err(MaatError::Dimension(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let n = b.shape[1];
    let m = if k == 0 {
        a.shape[..a.ndim() - 1].iter().product()
    } else {
        a.len() / k
    };
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    let mut shape = a.shape[..a.ndim() - 1].to_vec();
    shape.push(n);
    Tensor::new(shape, out)
}

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Softmax along the last axis.
///
/// Masked entries (`mask[idx] == false` means excluded) are written as exact
/// zeros. The mask is broadcast over leading axes: entry `idx` of the input
/// uses `mask[idx % mask.len()]`.
pub fn softmax_rows(a: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let mut out = a.data.clone();
    softmax_rows_in_place(&mut out, a.last_dim(), mask)?;
    Tensor::new(a.shape.clone(), out)
}

pub(crate) fn softmax_rows_in_place(data: &mut [f64], n: usize, mask: Option<&[bool]>) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    if let Some(m) = mask {
        if m.is_empty() || m.len() % n != 0 || data.len() % m.len() != 0 {
            return Err(MaatError::Dimension(format!(
                "mask of length {} does not tile input of length {}",
                m.len(),
                data.len()
            )));
        }
    }
    for (r, row) in data.chunks_mut(n).enumerate() {
        let base = r * n;
        let keep = |j: usize| mask.is_none_or(|m| m[(base + j) % m.len()]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(MaatError::DegenerateRow { row: r });
        }
        let mut total = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if keep(j) {
                *v = (*v - max).exp();
                total += *v;
            } else {
                *v = 0.0;
            }
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(())
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes over the last axis, then applies `gamma * x_hat + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if d == 0 || x.ndim() == 0 {
        return Err(MaatError::Dimension("layer_norm over an empty axis".into()));
    }
    if gamma.shape != [d] || beta.shape != [d] {
        return Err(MaatError::Dimension(format!(
            "layer_norm affine params {:?}/{:?} vs last extent {}",
            gamma.shape, beta.shape, d
        )));
    }
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data.chunks(d).zip(out.chunks_mut(d)) {
        let (mean, rstd) = moments(src, eps);
        for j in 0..d {
            dst[j] = (src[j] - mean) * rstd * gamma.data[j] + beta.data[j];
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Mean and reciprocal standard deviation (biased variance) of a row.
pub(crate) fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; b[0].len()]; a.len()];
        for i in 0..a.len() {
            for j in 0..b[0].len() {
                for p in 0..b.len() {
                    out[i][j] += a[i][p] * b[p][j];
                }
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &m).unwrap(), m);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for (m, k, n) in [(5, 4, 3), (16, 16, 16), (1, 7, 2)] {
            let a: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..k).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let b: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let got = matmul(&Tensor::from_rows(&a).unwrap(), &Tensor::from_rows(&b).unwrap()).unwrap();
            let want = Tensor::from_rows(&naive(&a, &b)).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(MaatError::Dimension(_))));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = softmax_rows(&Tensor::zeros(&[1, 3]), None).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_masked_entry_is_exact_zero() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.7, 5.0]]).unwrap(), Some(&[true, false])).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap(), None).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (j, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((s.data()[j] - v.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let r = softmax_rows(&Tensor::zeros(&[2, 2]), Some(&[true, true, false, false]));
        assert!(matches!(r, Err(MaatError::DegenerateRow { row: 1 })));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::full(&[1, 4], 3.5);
        let y = layer_norm(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), LAYER_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_points() {
        let x = Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap();
        let y = layer_norm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), LAYER_NORM_EPS).unwrap();
        // var = 1, so the eps correction is 1/sqrt(1 + 1e-5)
        let c = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] + c).abs() < 1e-12 && (y.data()[1] - c).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_row_statistics() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let data = (0..32).map(|_| rng.random_range(-5.0..5.0)).collect();
        let x = Tensor::new(vec![4, 8], data).unwrap();
        let y = layer_norm(&x, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8]), LAYER_NORM_EPS).unwrap();
        for row in y.data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_rejects_empty_axis() {
        let x = Tensor::zeros(&[3, 0]);
        let r = layer_norm(&x, &Tensor::zeros(&[0]), &Tensor::zeros(&[0]), LAYER_NORM_EPS);
        assert!(matches!(r, Err(MaatError::Dimension(_))));
    }
}
