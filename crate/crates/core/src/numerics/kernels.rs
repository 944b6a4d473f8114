//! Stand-alone numeric kernels shared by the model, losses and diagnostics.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor applied inside logarithms and norms.
pub const EPS: f64 = 1e-12;

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(format!("axis {axis} invalid for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax of `x` along `axis`, with optional mask (`true` = keep).
///
/// The mask either has one entry per element of `x` or one entry per position
/// along `axis`, in which case it is broadcast over the other axes. Masked
/// entries come out exactly zero.
pub fn softmax<S: Scalar>(x: &Tensor<S>, axis: usize, mask: Option<&[bool]>) -> Result<Tensor<S>> {
    x.ensure_finite("softmax input")?;
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    if let Some(m) = mask {
        if m.len() != x.numel() && m.len() != n {
            return Err(Error::shape(format!(
                "mask of length {} does not broadcast to {:?}",
                m.len(),
                x.shape()
            )));
        }
    }
    let keep = |flat: usize, i: usize| match mask {
        None => true,
        Some(m) if m.len() == n => m[i],
        Some(m) => m[flat],
    };
    let src = x.data();
    let mut out = vec![S::zero(); x.numel()];
    let mut buf = vec![0.0f64; n];
    for o in 0..outer {
        for r in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + r;
            let mut max = f64::NEG_INFINITY;
            for i in 0..n {
                if keep(idx(i), i) {
                    max = max.max(src[idx(i)].as_f64());
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateSlice);
            }
            let mut total = 0.0;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if keep(idx(i), i) { (src[idx(i)].as_f64() - max).exp() } else { 0.0 };
                total += *b;
            }
            for (i, b) in buf.iter().enumerate() {
                out[idx(i)] = S::of(b / total);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// In-place softmax of an `f64` slice; returns log-sum-exp.
pub(crate) fn softmax_in_place(xs: &mut [f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
    max + total.ln()
}

/// Log-softmax of one row of logits, in `f64`.
pub(crate) fn log_softmax_row<S: Scalar>(row: &[S], temperature: f64) -> Vec<f64> {
    let xs: Vec<f64> = row.iter().map(|x| x.as_f64() / temperature).collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.into_iter().map(|x| x - lse).collect()
}

/// `KL(p || q) = sum p_i log(p_i / q_i)`, treating `p` and `q` as single
/// distributions over all of their entries.
pub fn kl_divergence<S: Scalar>(p: &Tensor<S>, q: &Tensor<S>) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::shape(format!("kl: {:?} vs {:?}", p.shape(), q.shape())));
    }
    kl_slices(&p.to_f64_vec(), &q.to_f64_vec())
}

pub(crate) fn kl_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl: length mismatch"));
    }
    for xs in [p, q] {
        let s: f64 = xs.iter().sum();
        if (s - 1.0).abs() > 1e-6 || xs.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::NotNormalized(s));
        }
    }
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(EPS).ln()))
        .sum();
    Ok(kl.max(0.0))
}

/// Scales each slice along `axis` to unit L2 norm.
pub fn l2_normalize<S: Scalar>(v: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let (outer, n, inner) = axis_split(v.shape(), axis)?;
    let src = v.data();
    let mut out = vec![S::zero(); v.numel()];
    for o in 0..outer {
        for r in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + r;
            let norm = (0..n).map(|i| src[idx(i)].as_f64().powi(2)).sum::<f64>().sqrt();
            if norm < EPS {
                return Err(Error::DegenerateVector("l2_normalize"));
            }
            for i in 0..n {
                out[idx(i)] = S::of(src[idx(i)].as_f64() / norm);
            }
        }
    }
    Tensor::new(v.shape().to_vec(), out)
}

pub(crate) fn norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine<S: Scalar>(u: &Tensor<S>, v: &Tensor<S>) -> Result<f64> {
    if u.numel() != v.numel() {
        return Err(Error::shape("cosine: length mismatch"));
    }
    cosine_slices(&u.to_f64_vec(), &v.to_f64_vec())
}

pub fn cosine_slices(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine: length mismatch"));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu < EPS || nv < EPS {
        return Err(Error::DegenerateVector("cosine"));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Singular values of a row-major `rows x cols` matrix, descending.
///
/// One-sided Jacobi (Hestenes) on whichever orientation has fewer columns.
pub fn singular_values(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(data.len(), rows * cols);
    // Work on column vectors of the tall orientation.
    let (m, n) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let mut colv: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            (0..m)
                .map(|r| if rows >= cols { data[r * cols + c] } else { data[c * cols + r] })
                .collect()
        })
        .collect();
    let tol = 1e-15;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (a, b) = (&colv[p], &colv[q]);
                    (dot(a, a), dot(b, b), dot(a, b))
                };
                if gamma.abs() <= tol * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = colv.split_at_mut(q);
                let (a, b) = (&mut lo[p], &mut hi[0]);
                for (x, y) in a.iter_mut().zip(b.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = colv.iter().map(|c| norm(c)).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Spectrum of a column-centered matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    /// Nonincreasing, nonnegative; `min(n, d)` entries.
    pub singular_values: Vec<f64>,
    /// `cumvar[i]` is the variance fraction captured by the top `i + 1` components.
    pub cumvar: Vec<f64>,
}

impl Spectrum {
    /// Variance fraction captured by the top `k` components (`k = 0` gives 0).
    pub fn cumvar_at(&self, k: usize) -> f64 {
        match k {
            0 => 0.0,
            k => self.cumvar[(k - 1).min(self.cumvar.len() - 1)],
        }
    }

    /// Smallest rank whose cumulative variance reaches `threshold`.
    pub fn rank_at(&self, threshold: f64) -> usize {
        self.cumvar
            .iter()
            .position(|&c| c >= threshold - 1e-12)
            .map(|i| i + 1)
            .unwrap_or(self.cumvar.len())
    }
}

/// Centers `h` (`[n x d]`) per column, then reports singular values and
/// cumulative explained variance.
pub fn svd_cumvariance<S: Scalar>(h: &Tensor<S>) -> Result<Spectrum> {
    if h.rank() != 2 {
        return Err(Error::shape(format!("svd_cumvariance wants a matrix, got {:?}", h.shape())));
    }
    let (n, d) = (h.shape()[0], h.shape()[1]);
    if n < 2 || d < 1 {
        return Err(Error::shape(format!("svd_cumvariance needs n >= 2, got [{n} x {d}]")));
    }
    let mut x = h.to_f64_vec();
    for c in 0..d {
        let mean = (0..n).map(|r| x[r * d + c]).sum::<f64>() / n as f64;
        for r in 0..n {
            x[r * d + c] -= mean;
        }
    }
    let singular_values = singular_values(&x, n, d);
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total < EPS {
        return Err(Error::DegenerateVector("svd_cumvariance: centered matrix is zero"));
    }
    let mut acc = 0.0;
    let mut cumvar: Vec<f64> = singular_values
        .iter()
        .map(|s| {
            acc += s * s;
            (acc / total).min(1.0)
        })
        .collect();
    if let Some(last) = cumvar.last_mut() {
        *last = 1.0;
    }
    Ok(Spectrum { singular_values, cumvar })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngState;

    fn t(xs: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(vec![xs.len()], xs).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[0.0, 0.0]), 0, None).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[1000.0, 1000.0, 1000.0]), 0, None).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        // exp(i) / sum exp(j), evaluated independently in high precision
        let z: f64 = (1.0f64).exp() + (2.0f64).exp() + (3.0f64).exp();
        let oracle = [1.0f64.exp() / z, 2.0f64.exp() / z, 3.0f64.exp() / z];
        let s = softmax(&t(&[1.0, 2.0, 3.0]), 0, None).unwrap();
        for (a, b) in s.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((a - b).abs() < 1e-5);
        }
        for (a, b) in s.data().iter().zip(oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_mask_and_axis() {
        let x = Tensor::<f64>::from_f64(vec![2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let m = [true, false, true];
        let s = softmax(&x, 1, Some(&m)).unwrap();
        assert_eq!(s.at(&[0, 1]), 0.0);
        assert_eq!(s.at(&[1, 1]), 0.0);
        assert!((s.at(&[1, 0]) - 0.5).abs() < 1e-12);
        let col = softmax(&x, 0, None).unwrap();
        assert!((col.at(&[0, 2]) + col.at(&[1, 2]) - 1.0).abs() < 1e-12);
        assert!(matches!(
            softmax(&x, 1, Some(&[false, false, false])),
            Err(Error::DegenerateSlice)
        ));
        assert!(softmax(&t(&[f64::NAN, 1.0]), 0, None).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&t(&[0.5, 0.5]), &t(&[0.5, 0.5])).unwrap(), 0.0);
        let v = kl_divergence(&t(&[1.0, 0.0]), &t(&[0.5, 0.5])).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let v = kl_divergence(&t(&[0.5, 0.5]), &t(&[0.9, 0.1])).unwrap();
        let oracle = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.51083).abs() < 1e-5);
        assert!(kl_divergence(&t(&[0.5, 0.6]), &t(&[0.5, 0.5])).is_err());
        assert!(kl_divergence(&t(&[1.0]), &t(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&t(&[3.0, 4.0]), 0).unwrap().data(), &[0.6, 0.8]);
        assert_eq!(l2_normalize(&t(&[2.0, 0.0, 0.0]), 0).unwrap().data(), &[1.0, 0.0, 0.0]);
        let u = l2_normalize(&t(&[0.6, 0.8]), 0).unwrap();
        assert!(u.max_abs_diff(&t(&[0.6, 0.8])) < 1e-15);
        assert!(l2_normalize(&t(&[0.0, 0.0]), 0).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&t(&[1.0, 2.0]), &t(&[1.0, 2.0])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&t(&[1.0, 0.0]), &t(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(cosine(&t(&[1.0, 0.0]), &t(&[-1.0, 0.0])).unwrap(), -1.0);
        assert!(cosine(&t(&[0.0, 0.0]), &t(&[1.0, 0.0])).is_err());
    }

    fn random_matrix(n: usize, d: usize, rng: &mut RngState) -> Vec<f64> {
        (0..n * d).map(|_| rng.normal()).collect()
    }

    fn product(a: &[f64], b: &[f64], n: usize, r: usize, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for p in 0..r {
                for j in 0..d {
                    out[i * d + j] += a[i * r + p] * b[p * d + j];
                }
            }
        }
        out
    }

    #[test]
    fn rank_one_spectrum() {
        let mut rng = RngState::new(1);
        let u = random_matrix(30, 1, &mut rng);
        let v = random_matrix(1, 6, &mut rng);
        let h = Tensor::<f64>::new(vec![30, 6], product(&u, &v, 30, 1, 6)).unwrap();
        let s = svd_cumvariance(&h).unwrap();
        let above = s.singular_values.iter().filter(|&&x| x > 1e-8 * s.singular_values[0]).count();
        assert_eq!(above, 1);
        assert!((s.cumvar_at(1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn isotropic_design() {
        // Hadamard-style rows: +-1 patterns with equal column variance and
        // orthogonal centered columns.
        let d = 4;
        let mut rows = Vec::new();
        for i in 0..8usize {
            for j in 0..d {
                let bit = ((i >> j) & 1) as f64;
                rows.push(2.0 * bit - 1.0);
            }
        }
        // 8 rows x 4 cols only use 3 bits, so add the parity column manually.
        for i in 0..8usize {
            let parity = ((i.count_ones() % 2) as f64) * 2.0 - 1.0;
            rows[i * d + 3] = parity;
        }
        let h = Tensor::<f64>::new(vec![8, d], rows).unwrap();
        let s = svd_cumvariance(&h).unwrap();
        for k in 1..=d {
            assert!((s.cumvar_at(k) - k as f64 / d as f64).abs() < 1e-9, "k={k}");
        }
    }

    #[test]
    fn low_rank_threshold() {
        let mut rng = RngState::new(5);
        for r in [1usize, 3, 7] {
            let a = random_matrix(200, r, &mut rng);
            let b = random_matrix(r, 16, &mut rng);
            let h = Tensor::<f64>::new(vec![200, 16], product(&a, &b, 200, r, 16)).unwrap();
            let s = svd_cumvariance(&h).unwrap();
            assert_eq!(s.rank_at(0.99), r);
            assert!((s.cumvar_at(16) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn jacobi_matches_nalgebra() {
        let mut rng = RngState::new(9);
        for (n, d) in [(12usize, 5usize), (5, 12), (20, 20)] {
            let x = random_matrix(n, d, &mut rng);
            let ours = singular_values(&x, n, d);
            let m = nalgebra::DMatrix::from_row_slice(n, d, &x);
            let mut theirs: Vec<f64> = m.singular_values().iter().copied().collect();
            theirs.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for (a, b) in ours.iter().zip(&theirs) {
                assert!((a - b).abs() < 1e-9 * theirs[0], "{a} vs {b}");
            }
        }
    }

    #[test]
    fn degenerate_shapes() {
        let one = Tensor::<f64>::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(svd_cumvariance(&one).is_err());
        let flat = Tensor::<f64>::new(vec![3, 2], vec![1.0; 6]).unwrap();
        assert!(svd_cumvariance(&flat).is_err());
    }
}
