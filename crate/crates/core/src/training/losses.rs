use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    l2_normalize_rows, l2_normalize_rows_backward, log_sum_exp, softmax_rows, Matrix, NORM_EPS,
};

/// Temperature of the segmentation logits.
pub const TAU_SEG: f64 = 0.07;

/// Learnable temperatures, stored as logarithms so they stay positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub log_tau1: f64,
    pub log_tau2: f64,
}

impl LossParams {
    pub fn new(tau1: f64, tau2: f64) -> Self {
        LossParams { log_tau1: tau1.ln(), log_tau2: tau2.ln() }
    }

    pub fn tau1(&self) -> f64 {
        self.log_tau1.exp()
    }

    pub fn tau2(&self) -> f64 {
        self.log_tau2.exp()
    }
}

/// Mean over rows of `−log softmax(logits)[row, target(row)]`, plus the
/// gradient w.r.t. the logits.
fn cross_entropy(logits: &Matrix, target: impl Fn(usize) -> usize) -> (f64, Matrix) {
    let n = logits.rows() as f64;
    let mut loss = 0.0;
    for r in 0..logits.rows() {
        let row = logits.row(r);
        loss += log_sum_exp(row.iter().copied()) - row[target(r)];
    }
    let mut grad = softmax_rows(logits);
    for r in 0..grad.rows() {
        grad[(r, target(r))] -= 1.0;
    }
    (loss / n, grad.scale(1.0 / n))
}

#[derive(Debug, Clone)]
pub struct AlignGrads {
    pub f_t: Matrix,
    pub f_t_prime: Matrix,
    pub log_tau1: f64,
    pub log_tau2: f64,
}

/// Symmetric contrastive alignment between projector output and the
/// linear re-embedding of the raw text features.
pub fn align_loss(f_t: &Matrix, f_t_prime: &Matrix, p: &LossParams) -> Result<f64> {
    align_loss_grad(f_t, f_t_prime, p).map(|(l, _)| l)
}

pub fn align_loss_grad(f_t: &Matrix, f_t_prime: &Matrix, p: &LossParams) -> Result<(f64, AlignGrads)> {
    const OP: &str = "align_loss";
    if f_t.shape() != f_t_prime.shape() {
        return Err(Error::shape(OP, format!("{:?} vs {:?}", f_t.shape(), f_t_prime.shape())));
    }
    if f_t.rows() < 2 {
        return Err(Error::argument(OP, "contrast needs at least two categories"));
    }
    let (tau1, tau2) = (p.tau1(), p.tau2());
    let a = l2_normalize_rows(f_t, NORM_EPS);
    let b = l2_normalize_rows(f_t_prime, NORM_EPS);
    let sim = a.matmul_t(&b)?;
    let s1 = sim.scale(1.0 / tau1);
    let s2 = sim.transpose().scale(1.0 / tau2);
    let (ce1, g1) = cross_entropy(&s1, |r| r);
    let (ce2, g2) = cross_entropy(&s2, |r| r);
    let loss = 0.5 * (ce1 + ce2);
    if !loss.is_finite() {
        return Err(Error::numeric(OP, "non-finite loss"));
    }
    let g1 = g1.scale(0.5);
    let g2 = g2.scale(0.5);
    // S1 = a·bᵀ/τ1, S2 = b·aᵀ/τ2
    let mut d_a = g1.matmul(&b)?.scale(1.0 / tau1);
    d_a.add_scaled(&g2.t_matmul(&b)?, 1.0 / tau2)?;
    let mut d_b = g1.t_matmul(&a)?.scale(1.0 / tau1);
    d_b.add_scaled(&g2.matmul(&a)?, 1.0 / tau2)?;
    let grads = AlignGrads {
        f_t: l2_normalize_rows_backward(f_t, &d_a, NORM_EPS),
        f_t_prime: l2_normalize_rows_backward(f_t_prime, &d_b, NORM_EPS),
        log_tau1: -g1.dot(&s1),
        log_tau2: -g2.dot(&s2),
    };
    Ok((loss, grads))
}

pub fn seg_logits(f_v: &Matrix, f_t: &Matrix, tau_seg: f64) -> Result<Matrix> {
    Ok(l2_normalize_rows(f_v, NORM_EPS)
        .matmul_t(&l2_normalize_rows(f_t, NORM_EPS))?
        .scale(1.0 / tau_seg))
}

/// Per-token cosine-similarity classifier against the text rows,
/// mean cross-entropy against `labels`.
pub fn seg_loss(f_v: &Matrix, f_t: &Matrix, labels: &[usize], tau_seg: f64) -> Result<f64> {
    seg_loss_grad(f_v, f_t, labels, tau_seg).map(|(l, _, _)| l)
}

/// Loss with gradients w.r.t. the visual tokens and the text rows.
pub fn seg_loss_grad(
    f_v: &Matrix,
    f_t: &Matrix,
    labels: &[usize],
    tau_seg: f64,
) -> Result<(f64, Matrix, Matrix)> {
    const OP: &str = "seg_loss";
    if f_v.cols() != f_t.cols() {
        return Err(Error::shape(OP, format!("token width {} vs text width {}", f_v.cols(), f_t.cols())));
    }
    if labels.len() != f_v.rows() {
        return Err(Error::shape(OP, format!("{} labels for {} tokens", labels.len(), f_v.rows())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= f_t.rows()) {
        return Err(Error::argument(OP, format!("label {bad} outside [0, {})", f_t.rows())));
    }
    let a = l2_normalize_rows(f_v, NORM_EPS);
    let b = l2_normalize_rows(f_t, NORM_EPS);
    let logits = a.matmul_t(&b)?.scale(1.0 / tau_seg);
    let (loss, d_logits) = cross_entropy(&logits, |r| labels[r]);
    if !loss.is_finite() {
        return Err(Error::numeric(OP, "non-finite loss"));
    }
    let d_logits = d_logits.scale(1.0 / tau_seg);
    let d_a = d_logits.matmul(&b)?;
    let d_b = d_logits.t_matmul(&a)?;
    Ok((
        loss,
        l2_normalize_rows_backward(f_v, &d_a, NORM_EPS),
        l2_normalize_rows_backward(f_t, &d_b, NORM_EPS),
    ))
}

/// `L = L_seg + L_align`.
pub fn total_loss(seg: f64, align: f64) -> f64 {
    seg + align
}
