use serde::{Deserialize, Serialize};

use super::model::{loss_and_grad, loss_value, ModelConfig, ModelParams, ParamSet};
use super::synthetic::Instance;
use crate::error::Result;
use crate::numerics::{fd_gradient, relative_error, Rng};

/// Finite-difference step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub analytic_norm: f64,
    pub relative_error: f64,
}

/// Compares the analytic gradient of the total loss with central
/// differences of the forward pass, tensor by tensor.
pub fn gradient_check(cfg: &ModelConfig, params: &ModelParams, inst: &Instance, h: f64) -> Result<Vec<TensorCheck>> {
    let (_, grads) = loss_and_grad(cfg, params, inst)?;
    let analytic = grads.flatten();
    let x0 = params.flatten();
    let mut probe = params.clone();
    let numeric = fd_gradient(
        |x| {
            probe.load(x);
            loss_value(cfg, &probe, inst)
        },
        &x0,
        h,
    )?;
    Ok(params
        .layout()
        .into_iter()
        .map(|(name, _, off, len)| {
            let a = &analytic[off..off + len];
            let n = &numeric[off..off + len];
            TensorCheck {
                name,
                len,
                analytic_norm: a.iter().map(|v| v * v).sum::<f64>().sqrt(),
                relative_error: relative_error(a, n),
            }
        })
        .collect())
}

/// Moves every tensor away from its structured initial value (zero output
/// maps, identity projections, zero scalars) so that no gradient path is
/// trivially zero.
pub fn perturb_for_check(params: &mut ModelParams, seed: u64) {
    let mut rng = Rng::new(seed);
    for block in params.blocks.iter_mut() {
        for b in [&mut block.attn.block1, &mut block.attn.block2] {
            let (r, c) = b.w_o.shape();
            b.w_o = rng.normal_matrix(r, c, 0.4);
            b.lambda = 0.2 + 0.6 * rng.uniform();
        }
        let p = &mut block.pooling;
        let d = p.proj_v.rows();
        p.proj_v.add_scaled(&rng.normal_matrix(d, d, 0.3), 1.0).expect("square");
        p.proj_t.add_scaled(&rng.normal_matrix(d, d, 0.3), 1.0).expect("square");
        p.gamma_v = 0.3 * rng.normal();
        p.gamma_t = 0.3 * rng.normal();
        p.gamma_single = 0.5 * rng.normal();
        block.mask_token = (0..block.mask_token.len()).map(|_| rng.normal()).collect();
    }
    params.loss.log_tau1 = (0.4 + 0.4 * rng.uniform()).ln();
    params.loss.log_tau2 = (0.4 + 0.4 * rng.uniform()).ln();
}
