//! The invariant suite run on one forward pass.
//!
//! Every check in [`INVARIANT_NAMES`] is reported exactly once, in that
//! order. A check that cannot be evaluated fails with no measured value.

use xagent_core::attention::{agent_attention, mean_attention_distance, DiffAttnOptions};
use xagent_core::training::{
    forward, gradient_check, perturb_for_check, synthetic, ForwardPass, Instance, LayerTrace, ModelConfig,
    ModelParams, ParamSet, SyntheticConfig, FD_STEP,
};
use xagent_core::Matrix;

use crate::report::InvariantResult;

pub const INVARIANT_NAMES: [&str; 16] = [
    "transport.marginals",
    "selection.agent_count",
    "selection.unique_sources",
    "pooling.mask_columns",
    "pooling.gamma_reparam",
    "attention.branch_row_sums",
    "attention.differential_row_sums",
    "attention.output_shape",
    "attention.residual_identity",
    "model.finite",
    "model.deterministic",
    "model.shared_block_census",
    "losses.align_nonnegative",
    "losses.temperatures_positive",
    "mad.bounds",
    "gradients.finite_difference",
];

pub const MARGINAL_TOL: f64 = 1e-6;
pub const STOCHASTIC_TOL: f64 = 1e-9;
pub const GRADIENT_TOL: f64 = 1e-4;

type Measured = Result<f64, String>;

fn verdict(name: &str, tolerance: f64, measured: Measured, pass: impl Fn(f64) -> bool) -> InvariantResult {
    match measured {
        Ok(v) => InvariantResult {
            name: name.to_string(),
            passed: v.is_finite() && pass(v),
            measured: v.is_finite().then_some(v),
            tolerance,
            detail: (!v.is_finite()).then(|| format!("measured {v}")),
        },
        Err(e) => InvariantResult { name: name.to_string(), passed: false, measured: None, tolerance, detail: Some(e) },
    }
}

fn at_most(tol: f64) -> impl Fn(f64) -> bool {
    move |v| v <= tol
}

fn max_of(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, f64::max)
}

fn row_deviation(m: &Matrix, target: f64) -> f64 {
    max_of(m.row_sums().into_iter().map(|s| (s - target).abs()))
}

fn col_deviation(m: &Matrix) -> f64 {
    max_of(m.col_sums().into_iter().map(|s| (s - 1.0).abs()))
}

/// Token-to-token map through the agents: the positive visual→agent branch
/// (head-averaged) followed by the agents' visual pooling masks.
pub fn agent_token_map(trace: &LayerTrace) -> Result<Matrix, String> {
    let record = trace.attention_record().visual_agent;
    let mut positive = Matrix::zeros(record.heads[0].positive.rows(), record.heads[0].positive.cols());
    for h in &record.heads {
        positive.add_scaled(&h.positive, 1.0 / record.heads.len() as f64).map_err(|e| e.to_string())?;
    }
    positive.matmul_t(&trace.pooling.mask_v).map_err(|e| e.to_string())
}

/// Backbone and agent-mediated MAD of one layer.
pub fn layer_mad(trace: &LayerTrace, grid: (usize, usize)) -> Result<(Option<f64>, f64), String> {
    let (w, h) = grid;
    let backbone = trace
        .backbone_weights
        .as_ref()
        .map(|m| mean_attention_distance(m, w, h))
        .transpose()
        .map_err(|e| e.to_string())?;
    let agent = mean_attention_distance(&agent_token_map(trace)?, w, h).map_err(|e| e.to_string())?;
    Ok((backbone, agent))
}

/// Four-token copy of the configured pipeline used for the gradient check.
fn gradient_instance(cfg: &ModelConfig, seed: u64) -> (ModelConfig, Instance) {
    let mut small = cfg.clone();
    let categories = 3;
    small.selection.k = cfg.selection.k.min(2);
    small.selection.q = cfg.selection.q.min(2);
    let data = SyntheticConfig {
        tokens: 4,
        categories,
        dim: cfg.dim,
        text_dim: cfg.text_dim,
        ..SyntheticConfig::default()
    };
    let inst = synthetic::generate(&data, seed).expect("fixed small instance is valid");
    (small, inst)
}

pub fn gradient_check_error(cfg: &ModelConfig, seed: u64) -> Measured {
    let (small, inst) = gradient_instance(cfg, seed);
    let mut params = ModelParams::init(&small, seed);
    perturb_for_check(&mut params, seed.wrapping_add(100));
    let checks = gradient_check(&small, &params, &inst, FD_STEP).map_err(|e| e.to_string())?;
    Ok(max_of(checks.iter().map(|c| c.relative_error)))
}

/// Runs every check on `params` and `inst`.
pub fn invariant_suite(cfg: &ModelConfig, params: &ModelParams, inst: &Instance) -> Vec<InvariantResult> {
    match forward(cfg, params, inst) {
        Ok(fwd) => checks_on(cfg, params, inst, &fwd),
        Err(e) => INVARIANT_NAMES
            .iter()
            .map(|n| InvariantResult {
                name: n.to_string(),
                passed: false,
                measured: None,
                tolerance: 0.0,
                detail: Some(format!("forward pass failed: {e}")),
            })
            .collect(),
    }
}

fn checks_on(cfg: &ModelConfig, params: &ModelParams, inst: &Instance, fwd: &ForwardPass) -> Vec<InvariantResult> {
    let layers = &fwd.layers;
    let n_agents = cfg.selection.agent_count();
    let mut out = Vec::with_capacity(INVARIANT_NAMES.len());

    let marginals: Measured = layers.iter().try_fold(0.0_f64, |acc, t| match &t.selection.plan {
        Some(p) if !p.converged => Err(format!("transport did not converge in {} iterations", p.iterations)),
        Some(p) => Ok(acc.max(p.marginal_error)),
        None => Ok(acc),
    });
    out.push(verdict(INVARIANT_NAMES[0], MARGINAL_TOL, marginals, at_most(MARGINAL_TOL)));

    let count_gap = max_of(layers.iter().map(|t| (t.agents.rows() as f64 - n_agents as f64).abs()));
    out.push(verdict(INVARIANT_NAMES[1], 0.0, Ok(count_gap), at_most(0.0)));

    let dupes = layers.iter().filter(|t| t.selection.selection.has_unmasked_duplicates()).count() as f64;
    out.push(verdict(INVARIANT_NAMES[2], 0.0, Ok(dupes), at_most(0.0)));

    let masks = max_of(layers.iter().map(|t| col_deviation(&t.pooling.mask_v).max(col_deviation(&t.pooling.mask_t))));
    out.push(verdict(INVARIANT_NAMES[3], STOCHASTIC_TOL, Ok(masks), at_most(STOCHASTIC_TOL)));

    let gamma = max_of(params.blocks.iter().map(|b| {
        let p = &b.pooling;
        (p.gamma() - ((p.gamma_v.exp() - p.gamma_t.exp()) + cfg.pooling.gamma_init)).abs()
    }));
    out.push(verdict(INVARIANT_NAMES[4], 0.0, Ok(gamma), at_most(0.0)));

    let mut branch = 0.0_f64;
    let mut differential = 0.0_f64;
    for t in layers {
        let rec = t.attention_record();
        for r in [&rec.agent_text, &rec.visual_agent] {
            for h in &r.heads {
                branch = branch.max(row_deviation(&h.positive, 1.0)).max(row_deviation(&h.negative, 1.0));
            }
            differential = differential.max(row_deviation(&r.differential(), 1.0 - r.lambda));
        }
    }
    out.push(verdict(INVARIANT_NAMES[5], STOCHASTIC_TOL, Ok(branch), at_most(STOCHASTIC_TOL)));
    out.push(verdict(INVARIANT_NAMES[6], STOCHASTIC_TOL, Ok(differential), at_most(STOCHASTIC_TOL)));

    let want = (inst.tokens.rows(), cfg.dim);
    let shape_misses = layers.iter().filter(|t| t.output.shape() != want).count() as f64;
    out.push(verdict(INVARIANT_NAMES[7], 0.0, Ok(shape_misses), at_most(0.0)));

    let opts = DiffAttnOptions::from(&cfg.attention);
    let residual: Measured = layers.iter().enumerate().try_fold(0.0_f64, |acc, (l, t)| {
        let mut attn = params.block_for(l).attn.clone();
        attn.block2.w_o = Matrix::zeros(attn.block2.w_o.rows(), attn.block2.w_o.cols());
        let (y, _) = agent_attention(&t.visual, &t.agents, &fwd.text.f_t, &attn, opts).map_err(|e| e.to_string())?;
        Ok(acc.max(y.sub(&t.visual).map_err(|e| e.to_string())?.max_abs()))
    });
    out.push(verdict(INVARIANT_NAMES[8], 0.0, residual, at_most(0.0)));

    let finite = layers.iter().all(|t| t.output.is_finite())
        && [fwd.loss.total, fwd.loss.seg, fwd.loss.align].iter().all(|v| v.is_finite());
    out.push(verdict(INVARIANT_NAMES[9], 0.0, Ok(if finite { 0.0 } else { 1.0 }), at_most(0.0)));

    let again: Measured = forward(cfg, params, inst).map_err(|e| e.to_string()).map(|f2| {
        let same = f2.output == fwd.output && f2.loss.total.to_bits() == fwd.loss.total.to_bits();
        if same {
            0.0
        } else {
            1.0
        }
    });
    out.push(verdict(INVARIANT_NAMES[10], 0.0, again, at_most(0.0)));

    let census = {
        let mut one = cfg.clone();
        one.layers = 1;
        let per_block = ModelParams::init(&one, 0).blocks[0].param_count();
        let blocks: usize = params.blocks.iter().map(|b| b.param_count()).sum();
        let expected = per_block * if cfg.shared_layers { 1 } else { cfg.layers };
        (blocks as f64 - expected as f64).abs()
    };
    out.push(verdict(INVARIANT_NAMES[11], 0.0, Ok(census), at_most(0.0)));

    out.push(verdict(INVARIANT_NAMES[12], 0.0, Ok(fwd.loss.align), |v| v >= 0.0));
    let tau = params.loss.tau1().min(params.loss.tau2());
    out.push(verdict(INVARIANT_NAMES[13], 0.0, Ok(tau), |v| v > 0.0));

    let (w, h) = inst.grid;
    let diameter = (((w - 1) * (w - 1) + (h - 1) * (h - 1)) as f64).sqrt();
    let mad: Measured = layers.iter().try_fold(0.0_f64, |acc, t| {
        let (b, a) = layer_mad(t, inst.grid)?;
        let worst = [b.unwrap_or(0.0), a]
            .into_iter()
            .map(|m| if m < 0.0 { -m } else { (m - diameter).max(0.0) })
            .fold(0.0, f64::max);
        Ok(acc.max(worst))
    });
    out.push(InvariantResult {
        detail: Some("distance outside [0, grid diameter]".into()),
        ..verdict(INVARIANT_NAMES[14], 0.0, mad, at_most(0.0))
    });

    out.push(verdict(INVARIANT_NAMES[15], GRADIENT_TOL, gradient_check_error(cfg, inst.seed), |v| v < GRADIENT_TOL));
    out
}
