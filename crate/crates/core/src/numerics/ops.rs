use std::ops::Deref;

use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Clamp for row norms so zero rows normalize to zero rows.
pub const NORM_EPS: f64 = 1e-12;

/// Variance floor for the optional layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Ordered list of indices into some dimension.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IndexList(pub Vec<usize>);

impl IndexList {
    pub fn new(indices: Vec<usize>) -> Self {
        IndexList(indices)
    }

    /// Checks every index against the dimension it addresses.
    pub fn check_bound(&self, bound: usize, op: &'static str) -> Result<()> {
        match self.0.iter().find(|&&i| i >= bound) {
            Some(i) => Err(Error::argument(op, format!("index {i} out of range for {bound}"))),
            None => Ok(()),
        }
    }

    pub fn has_duplicates(&self) -> bool {
        let mut seen = std::collections::HashSet::with_capacity(self.0.len());
        !self.0.iter().all(|i| seen.insert(*i))
    }
}

impl Deref for IndexList {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for IndexList {
    fn from(v: Vec<usize>) -> Self {
        IndexList(v)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log Σ exp(v)`.
pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Backward pass of [`softmax_rows`]: given the forward output `probs` and
/// the upstream gradient, returns the gradient w.r.t. the logits.
pub fn softmax_rows_backward(probs: &Matrix, grad_out: &Matrix) -> Matrix {
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let g = grad_out.row(r);
        let inner = dot(p, g);
        for ((o, &pi), &gi) in grad.row_mut(r).iter_mut().zip(p).zip(g) {
            *o = pi * (gi - inner);
        }
    }
    grad
}

/// Divides each row by `max(‖row‖₂, eps)`.
pub fn l2_normalize_rows(m: &Matrix, eps: f64) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = dot(row, row).sqrt().max(eps);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    out
}

/// Backward pass of [`l2_normalize_rows`].
pub fn l2_normalize_rows_backward(input: &Matrix, grad_out: &Matrix, eps: f64) -> Matrix {
    let mut grad = Matrix::zeros(input.rows(), input.cols());
    for r in 0..input.rows() {
        let x = input.row(r);
        let g = grad_out.row(r);
        let norm = dot(x, x).sqrt();
        let out = grad.row_mut(r);
        if norm > eps {
            // d(x/‖x‖) = (g − y (y·g)) / ‖x‖ with y = x/‖x‖
            let yg = dot(x, g) / norm;
            for ((o, &xi), &gi) in out.iter_mut().zip(x).zip(g) {
                *o = (gi - xi / norm * yg) / norm;
            }
        } else {
            for (o, &gi) in out.iter_mut().zip(g) {
                *o = gi / eps;
            }
        }
    }
    grad
}

/// Affine-free layer normalization over each row.
pub fn layer_norm_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    let n = m.cols() as f64;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// Backward pass of [`layer_norm_rows`].
pub fn layer_norm_rows_backward(input: &Matrix, grad_out: &Matrix) -> Matrix {
    let n = input.cols() as f64;
    let mut grad = Matrix::zeros(input.rows(), input.cols());
    for r in 0..input.rows() {
        let x = input.row(r);
        let g = grad_out.row(r);
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let y: Vec<f64> = x.iter().map(|v| (v - mean) * inv).collect();
        let g_mean = g.iter().sum::<f64>() / n;
        let gy_mean = dot(g, &y) / n;
        for ((o, &gi), &yi) in grad.row_mut(r).iter_mut().zip(g).zip(&y) {
            *o = inv * (gi - g_mean - yi * gy_mean);
        }
    }
    grad
}

/// Indices of the `k` largest (or smallest) values. Equal values keep
/// ascending index order.
pub fn topk(values: &[f64], k: usize, largest: bool) -> Result<IndexList> {
    if k > values.len() {
        return Err(Error::argument(
            "topk",
            format!("k = {k} exceeds length {}", values.len()),
        ));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps lower index first among ties
    if largest {
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    } else {
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    }
    order.truncate(k);
    Ok(IndexList(order))
}

pub fn gather_rows(m: &Matrix, idx: &IndexList) -> Result<Matrix> {
    idx.check_bound(m.rows(), "gather_rows")?;
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx.iter() {
        data.extend_from_slice(m.row(i));
    }
    Matrix::from_vec(idx.len(), m.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_row() {
        let s = softmax_rows(&Matrix::zeros(1, 2));
        assert_eq!(s.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let s = softmax_rows(&Matrix::row_vector(&[1000.0, 0.0]));
        assert!(s.is_finite());
        assert!((s[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(s[(0, 1)] < 1e-300);
    }

    #[test]
    fn normalize_3_4_5() {
        let n = l2_normalize_rows(&Matrix::row_vector(&[3.0, 4.0]), NORM_EPS);
        assert!((n[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((n[(0, 1)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_zero_row_stays_zero() {
        let n = l2_normalize_rows(&Matrix::zeros(1, 2), NORM_EPS);
        assert_eq!(n.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn topk_examples() {
        let v = [0.2, 0.5, 0.3];
        assert_eq!(topk(&v, 2, true).unwrap().0, vec![1, 2]);
        assert_eq!(topk(&v, 2, false).unwrap().0, vec![0, 2]);
        assert_eq!(topk(&[0.4, 0.4, 0.1], 1, true).unwrap().0, vec![0]);
        assert_eq!(topk(&[0.1, 0.4, 0.1], 2, false).unwrap().0, vec![0, 2]);
        assert!(matches!(topk(&v, 4, true), Err(Error::Argument { .. })));
    }

    #[test]
    fn gather_examples() {
        let m = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let g = gather_rows(&m, &IndexList(vec![2, 0])).unwrap();
        assert_eq!(g.as_slice(), &[3.0, 1.0]);
        assert_eq!(gather_rows(&m, &IndexList(vec![0, 1, 2])).unwrap(), m);
        assert!(gather_rows(&m, &IndexList(vec![3])).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-300);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 6.0]]).unwrap();
        let y = layer_norm_rows(&m);
        let mean: f64 = y.row(0).iter().sum::<f64>() / 4.0;
        let var: f64 = y.row(0).iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
