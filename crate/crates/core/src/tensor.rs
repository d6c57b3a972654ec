//! Dense row-major tensors and the value-level kernels shared with the tape.

use crate::error::{dim_err, Error, Result};
use crate::scalar::{gemm, lit, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return dim_err("tensor", format!("zero extent in shape {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            );
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> S) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::new(shape, (0..numel).map(&mut f).collect())
    }

    pub fn full(shape: Vec<usize>, value: S) -> Result<Self> {
        Self::from_fn(shape, |_| value)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: Vec<usize>) -> Result<Self> {
        Self::full(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar shape")
    }

    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn(vec![n, n], |i| if i / n == i % n { S::one() } else { S::zero() })
    }

    /// Builds a 2-D tensor from row slices.
    pub fn from_rows(rows: &[&[S]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("from_rows", "ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| lit(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<S>) -> Result<()> {
        if grad.len() != self.data.len() {
            return dim_err("set_grad", format!("{} vs {}", grad.len(), self.data.len()));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// `(rows, cols)` when viewed as a matrix over the last axis.
    pub fn as_matrix_dims(&self) -> (usize, usize) {
        let c = self.last_dim();
        (self.numel() / c, c)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return dim_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        Self::new(shape, self.data.clone())
    }

    pub fn get(&self, index: &[usize]) -> S {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {i} out of bounds");
            flat = flat * d + ix;
        }
        self.data[flat]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self::new(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return dim_err(op, format!("{:?} vs {:?}", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::new(self.shape.clone(), data)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: S) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn frobenius(&self) -> S {
        self.data.iter().map(|&x| x * x).sum::<S>().sqrt()
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return dim_err("transpose", format!("expected 2-D, got {:?}", self.shape));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Self::from_fn(vec![c, r], |i| self.data[(i % r) * c + i / r])
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k, n) = matmul_dims(&self.shape, &other.shape)?;
        let mut out = vec![S::zero(); m * n];
        gemm(false, false, m, k, n, &self.data, &other.data, S::zero(), &mut out);
        Self::new(vec![m, n], out)
    }

    pub fn softmax_lastdim(&self) -> Self {
        let mut out = self.data.clone();
        softmax_rows(&mut out, self.last_dim());
        Self::new(self.shape.clone(), out).expect("same shape")
    }

    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: S) -> Result<Self> {
        let c = self.last_dim();
        if gain.shape != [c] || bias.shape != [c] {
            return dim_err(
                "layer_norm",
                format!("gain {:?} / bias {:?} for channels {c}", gain.shape, bias.shape),
            );
        }
        let mut out = vec![S::zero(); self.numel()];
        layer_norm_rows(&self.data, &gain.data, &bias.data, eps, &mut out);
        Self::new(self.shape.clone(), out)
    }

    pub fn gelu(&self) -> Self {
        self.map(gelu)
    }

    pub fn relu(&self) -> Self {
        self.map(|x| x.max(S::zero()))
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 {
        return dim_err("matmul", format!("expected 2-D operands, got {a:?} x {b:?}"));
    }
    if a[1] != b[0] {
        return Err(Error::Dimension {
            op: "matmul",
            detail: format!("inner dimensions differ: {a:?} x {b:?}"),
        });
    }
    Ok((a[0], a[1], b[1]))
}

/// In-place softmax over consecutive rows of width `n`, max-subtracted.
pub(crate) fn softmax_rows<S: Scalar>(data: &mut [S], n: usize) {
    for row in data.chunks_mut(n) {
        let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
        let mut total = S::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        let inv = S::one() / total;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

/// Normalizes each row over its channels; returns per-row `(mean, 1/std)`.
pub(crate) fn layer_norm_rows<S: Scalar>(
    x: &[S],
    gain: &[S],
    bias: &[S],
    eps: S,
    out: &mut [S],
) -> (Vec<S>, Vec<S>) {
    let c = gain.len();
    let cs = S::from_usize(c).unwrap();
    let rows = x.len() / c;
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for (xr, or) in x.chunks(c).zip(out.chunks_mut(c)) {
        let mean = xr.iter().copied().sum::<S>() / cs;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cs;
        let rstd = S::one() / (var + eps).sqrt();
        for j in 0..c {
            or[j] = (xr[j] - mean) * rstd * gain[j] + bias[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (means, rstds)
}

/// Exact Gaussian-error linear unit, `x * Phi(x)`.
pub fn gelu<S: Scalar>(x: S) -> S {
    x * gauss_cdf(x)
}

pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let pdf = (-(x * x) / lit(2.0)).exp() / (S::PI() * lit(2.0)).sqrt();
    gauss_cdf(x) + x * pdf
}

fn gauss_cdf<S: Scalar>(x: S) -> S {
    lit::<S>(0.5) * (S::one() + (x / S::SQRT_2()).erf())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let a = t(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let i2 = Tensor::eye(2).unwrap();
        assert_eq!(i2.matmul(&a).unwrap(), a);
        let b = t(vec![2, 1], &[5.0, 6.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_zero_annihilates_and_checks_dims() {
        let z = Tensor::<f64>::zeros(vec![2, 3]).unwrap();
        let b = Tensor::from_fn(vec![3, 4], |i| i as f64 + 1.0).unwrap();
        let c = z.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert!(c.data().iter().all(|&x| x == 0.0));
        assert!(matches!(b.matmul(&z), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_examples() {
        let u = t(vec![3], &[7.5, 7.5, 7.5]).softmax_lastdim();
        for &p in u.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = t(vec![2], &[0.0, 2f64.ln()]).softmax_lastdim();
        assert!((p.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let big = t(vec![2], &[1000.0, 0.0]).softmax_lastdim();
        assert!(big.is_finite());
        assert!((big.data()[0] - 1.0).abs() < 1e-15);
        assert!(big.data()[1] < 1e-300);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::<f64>::ones(vec![4]).unwrap();
        let zeros = Tensor::<f64>::zeros(vec![4]).unwrap();
        let y = t(vec![4], &[3.0; 4]).layer_norm(&ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let g = Tensor::<f64>::ones(vec![2]).unwrap();
        let b = Tensor::<f64>::zeros(vec![2]).unwrap();
        let y = t(vec![2], &[1.0, 3.0]).layer_norm(&g, &b, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);

        let g0 = Tensor::<f64>::zeros(vec![3]).unwrap();
        let bias = t(vec![3], &[0.5, -1.0, 2.0]);
        let x = t(vec![2, 3], &[1.0, 5.0, -2.0, 0.3, 0.1, 9.0]);
        let y = x.layer_norm(&g0, &bias, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn gelu_anchor_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(30.0f64) - 30.0).abs() < 1e-12);
        assert!(gelu(-30.0f64).abs() < 1e-12);
    }

    #[test]
    fn transpose_swaps_axes() {
        let a = t(vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let at = a.transpose().unwrap();
        assert_eq!(at.shape(), &[3, 2]);
        assert_eq!(at.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
