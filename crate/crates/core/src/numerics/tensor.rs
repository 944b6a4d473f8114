use super::rng::RngState;
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Dense row-major array with shape metadata.
///
/// `requires_grad` marks a tensor as a trainable leaf when it is bound into a
/// [`Graph`](super::autograd::Graph); `grad` holds the last gradient written
/// back by an optimizer step, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| S::of(x)).collect())
    }

    pub fn vector(data: Vec<S>) -> Self {
        let n = data.len().max(1);
        let data = if data.is_empty() { vec![S::zero()] } else { data };
        Self { shape: vec![n], data, requires_grad: false, grad: None }
    }

    pub fn scalar(x: S) -> Self {
        Self { shape: vec![1], data: vec![x], requires_grad: false, grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n], requires_grad: false, grad: None }
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut RngState) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::of(rng.normal() * std)).collect();
        Self { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), n);
        }
        Ok(self)
    }

    pub fn at(&self, idx: &[usize]) -> S {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: S) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank");
        let mut o = 0;
        for (&i, &n) in idx.iter().zip(&self.shape) {
            assert!(i < n, "index {idx:?} out of bounds for {:?}", self.shape);
            o = o * n + i;
        }
        o
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|x| x * c)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::of(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self.grad.as_ref().map(|g| g.iter().map(|x| T::of(x.as_f64())).collect()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
    }

    /// Attaches a gradient; it must match the data length.
    pub fn set_grad(&mut self, grad: Vec<S>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("gradient length differs from tensor length"));
        }
        self.grad = Some(grad);
        Ok(())
    }
}

const BLOCK: usize = 4;

/// `out[i, j] = Σ_p a(i, p) * b[p, j]` with `b` row-major `[k x n]`, f64
/// accumulation over `p` in ascending order for every output element.
///
/// Both operands are packed into contiguous 4-wide panels so that full 4x4
/// output tiles stay in registers.
fn gemm<S: Scalar>(m: usize, k: usize, n: usize, b: &[S], a: impl Fn(usize, usize) -> f64 + Sync) -> Vec<S> {
    use rayon::prelude::*;
    let mut out = vec![S::zero(); m * n];
    if m == 0 || n == 0 {
        return out;
    }
    let tiles = n / BLOCK;
    let mut panels = vec![0.0f64; tiles * k * BLOCK];
    for t in 0..tiles {
        for p in 0..k {
            for jj in 0..BLOCK {
                panels[(t * k + p) * BLOCK + jj] = b[p * n + t * BLOCK + jj].as_f64();
            }
        }
    }
    let body = |(bi, chunk): (usize, &mut [S])| {
        let i0 = bi * BLOCK;
        let rows = chunk.len() / n;
        let mut apack = vec![0.0f64; k * BLOCK];
        for p in 0..k {
            for r in 0..rows {
                apack[p * BLOCK + r] = a(i0 + r, p);
            }
        }
        for t in 0..tiles {
            let panel = &panels[t * k * BLOCK..(t + 1) * k * BLOCK];
            let mut c = [[0.0f64; BLOCK]; BLOCK];
            for (av, bv) in apack.chunks_exact(BLOCK).zip(panel.chunks_exact(BLOCK)) {
                for r in 0..BLOCK {
                    for jj in 0..BLOCK {
                        c[r][jj] += av[r] * bv[jj];
                    }
                }
            }
            for r in 0..rows {
                for jj in 0..BLOCK {
                    chunk[r * n + t * BLOCK + jj] = S::of(c[r][jj]);
                }
            }
        }
        for r in 0..rows {
            for j in tiles * BLOCK..n {
                let mut x = 0.0;
                for p in 0..k {
                    x += apack[p * BLOCK + r] * b[p * n + j].as_f64();
                }
                chunk[r * n + j] = S::of(x);
            }
        }
    };
    if m * n * k >= 1 << 16 {
        out.par_chunks_mut(BLOCK * n).enumerate().for_each(body);
    } else {
        out.chunks_mut(BLOCK * n).enumerate().for_each(body);
    }
    out
}

/// Row-major matrix product `a [m x k] * b [k x n]` with 64-bit accumulation.
pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    gemm(m, k, n, b, |i, p| a[i * k + p].as_f64())
}

/// `a [m x k] * b^T` where `b` is `[n x k]`.
///
/// Transposes `b` once and reuses the row-axpy kernel; the accumulation order
/// over `k` is the same as a direct dot product.
pub(crate) fn matmul_bt_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut bt = vec![S::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul_raw(a, &bt, m, k, n)
}

/// `a^T * b` where `a` is `[m x k]` and `b` is `[m x n]`; result `[k x n]`.
pub(crate) fn matmul_at_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    gemm(k, m, n, b, |p, i| a[i * k + p].as_f64())
}
