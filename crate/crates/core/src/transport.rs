//! Entropy-regularized optimal transport between textual tokens and the
//! visual key matrix.
//!
//! The solver runs the classic Sinkhorn scaling `a = μ ⊘ (K b)`,
//! `b = ν ⊘ (Kᵀ a)` with `K = exp(−C/ε)` and `b⁰ = 1`, but carries `log a`
//! and `log b` so that tiny `ε` never underflows the kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, Matrix};

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_MAX_ITER: usize = 200;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Cost used between text rows and key rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostVariant {
    /// `1 − (f_t / max‖f_t‖)(K / max‖K‖)ᵀ`
    Dot,
    /// Mean absolute difference.
    Mae,
    /// Mean squared difference.
    Mse,
}

impl CostVariant {
    pub const ALL: [CostVariant; 3] = [CostVariant::Dot, CostVariant::Mae, CostVariant::Mse];

    pub fn name(self) -> &'static str {
        match self {
            CostVariant::Dot => "dot",
            CostVariant::Mae => "mae",
            CostVariant::Mse => "mse",
        }
    }
}

impl std::str::FromStr for CostVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dot" => Ok(CostVariant::Dot),
            "mae" => Ok(CostVariant::Mae),
            "mse" => Ok(CostVariant::Mse),
            other => Err(format!("unknown cost variant `{other}` (expected dot|mae|mse)")),
        }
    }
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub cost: CostVariant,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            epsilon: DEFAULT_EPSILON,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            cost: CostVariant::Dot,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportProblem {
    pub cost: Matrix,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub epsilon: f64,
}

impl TransportProblem {
    /// Problem with uniform marginals `1/rows` and `1/cols`.
    pub fn uniform(cost: Matrix, epsilon: f64) -> Result<Self> {
        let (r, c) = cost.shape();
        TransportProblem::new(cost, vec![1.0 / r as f64; r], vec![1.0 / c as f64; c], epsilon)
    }

    pub fn new(cost: Matrix, mu: Vec<f64>, nu: Vec<f64>, epsilon: f64) -> Result<Self> {
        const OP: &str = "TransportProblem::new";
        if cost.rows() == 0 || cost.cols() == 0 {
            return Err(Error::shape(OP, "empty cost matrix"));
        }
        if mu.len() != cost.rows() || nu.len() != cost.cols() {
            return Err(Error::shape(
                OP,
                format!(
                    "cost {:?} with marginals of length {} and {}",
                    cost.shape(),
                    mu.len(),
                    nu.len()
                ),
            ));
        }
        for (name, m) in [("mu", &mu), ("nu", &nu)] {
            if m.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::argument(OP, format!("{name} must be entrywise positive")));
            }
            let total: f64 = m.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::argument(OP, format!("{name} sums to {total}, expected 1")));
            }
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::argument(OP, format!("epsilon = {epsilon} must be positive")));
        }
        if !cost.is_finite() {
            return Err(Error::argument(OP, "cost has non-finite entries"));
        }
        Ok(TransportProblem { cost, mu, nu, epsilon })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub plan: Matrix,
    pub iterations: usize,
    /// Largest absolute violation over both marginals.
    pub marginal_error: f64,
    pub converged: bool,
}

impl TransportPlan {
    /// Shannon entropy `−Σ P log P` of the plan.
    pub fn entropy(&self) -> f64 {
        self.plan
            .as_slice()
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

/// Builds the `Nc×N` cost between text rows and key rows.
pub fn cost_matrix(text: &Matrix, key: &Matrix, variant: CostVariant) -> Result<Matrix> {
    const OP: &str = "cost_matrix";
    if text.cols() != key.cols() {
        return Err(Error::shape(
            OP,
            format!("text width {} vs key width {}", text.cols(), key.cols()),
        ));
    }
    let max_norm = |m: &Matrix| {
        (0..m.rows())
            .map(|r| dot(m.row(r), m.row(r)).sqrt())
            .fold(0.0, f64::max)
    };
    let (text_max, key_max) = (max_norm(text), max_norm(key));
    if text_max == 0.0 || key_max == 0.0 {
        return Err(Error::degenerate(OP, "text or key matrix is all zeros"));
    }
    let width = text.cols() as f64;
    let cost = match variant {
        CostVariant::Dot => {
            let sim = text.matmul_t(key)?;
            sim.map(|s| 1.0 - s / (text_max * key_max))
        }
        CostVariant::Mae => Matrix::from_fn(text.rows(), key.rows(), |i, j| {
            text.row(i).iter().zip(key.row(j)).map(|(a, b)| (a - b).abs()).sum::<f64>() / width
        }),
        CostVariant::Mse => Matrix::from_fn(text.rows(), key.rows(), |i, j| {
            text.row(i).iter().zip(key.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / width
        }),
    };
    cost.ensure_finite(OP)?;
    Ok(cost)
}

/// Solves the entropic transport problem by log-domain Sinkhorn scaling.
///
/// Each iteration updates `a` then `b`; after every iteration the largest
/// marginal violation is measured and the loop stops once it drops below
/// `tol`. Hitting `max_iter` is not an error: the plan is returned with
/// `converged = false`.
pub fn sinkhorn(problem: &TransportProblem, max_iter: usize, tol: f64) -> Result<TransportPlan> {
    const OP: &str = "sinkhorn";
    if max_iter == 0 {
        return Err(Error::argument(OP, "max_iter must be at least 1"));
    }
    if !(tol > 0.0) {
        return Err(Error::argument(OP, format!("tol = {tol} must be positive")));
    }
    let (rows, cols) = problem.cost.shape();
    let eps = problem.epsilon;
    let log_kernel = problem.cost.map(|c| -c / eps);
    if !log_kernel.is_finite() {
        return Err(Error::numeric(
            OP,
            format!("epsilon = {eps:e} overflows −C/ε; the kernel cannot be represented even in log domain"),
        ));
    }
    let log_mu: Vec<f64> = problem.mu.iter().map(|m| m.ln()).collect();
    let log_nu: Vec<f64> = problem.nu.iter().map(|n| n.ln()).collect();
    let mut log_a = vec![0.0; rows];
    let mut log_b = vec![0.0; cols];

    let mut plan = Matrix::zeros(rows, cols);
    let mut iterations = 0;
    let mut marginal_error = f64::INFINITY;
    while iterations < max_iter {
        iterations += 1;
        for i in 0..rows {
            let lk = log_kernel.row(i);
            log_a[i] = log_mu[i] - log_sum_exp(lk.iter().zip(&log_b).map(|(k, b)| k + b));
        }
        for j in 0..cols {
            log_b[j] = log_nu[j]
                - log_sum_exp((0..rows).map(|i| log_kernel[(i, j)] + log_a[i]));
        }
        for i in 0..rows {
            for j in 0..cols {
                plan[(i, j)] = (log_a[i] + log_kernel[(i, j)] + log_b[j]).exp();
            }
        }
        marginal_error = marginal_violation(&plan, &problem.mu, &problem.nu);
        if !marginal_error.is_finite() {
            break;
        }
        if marginal_error < tol {
            break;
        }
    }

    if !plan.is_finite() || plan.sum() == 0.0 || !marginal_error.is_finite() {
        return Err(Error::numeric(
            OP,
            format!(
                "plan underflowed or diverged at epsilon = {eps:e} after {iterations} iterations \
                 (cost range [{:.3e}, {:.3e}])",
                problem.cost.min(),
                problem.cost.max()
            ),
        ));
    }
    Ok(TransportPlan { plan, iterations, marginal_error, converged: marginal_error < tol })
}

/// `max(‖rowsums − μ‖∞, ‖colsums − ν‖∞)`.
pub fn marginal_violation(plan: &Matrix, mu: &[f64], nu: &[f64]) -> f64 {
    let rows = plan.row_sums().iter().zip(mu).fold(0.0_f64, |m, (s, t)| m.max((s - t).abs()));
    let cols = plan.col_sums().iter().zip(nu).fold(0.0_f64, |m, (s, t)| m.max((s - t).abs()));
    rows.max(cols)
}

/// Runs the configured cost and solver with uniform marginals.
pub fn solve(text: &Matrix, key: &Matrix, cfg: &TransportConfig) -> Result<TransportPlan> {
    let cost = cost_matrix(text, key, cfg.cost)?;
    let problem = TransportProblem::uniform(cost, cfg.epsilon)?;
    sinkhorn(&problem, cfg.max_iter, cfg.tol)
}
