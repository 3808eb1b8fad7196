use serde::{Deserialize, Serialize};

use super::model::{loss_and_grad, ModelConfig, ModelParams, ParamGroup, ParamSet};
use super::synthetic::Instance;
use crate::error::{Error, Result};

/// Step size of the decoder group; the backbone group defaults to 1/100 of it.
pub const DEFAULT_LR_DECODER: f64 = 0.05;
pub const DEFAULT_LR_BACKBONE: f64 = DEFAULT_LR_DECODER / 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub decoder: f64,
    pub backbone: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates { decoder: DEFAULT_LR_DECODER, backbone: DEFAULT_LR_BACKBONE }
    }
}

impl LearningRates {
    fn for_group(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Decoder => self.decoder,
            ParamGroup::Backbone => self.backbone,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub seg: f64,
    pub align: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub params: ModelParams,
    pub lr: LearningRates,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(params: ModelParams, lr: LearningRates) -> Self {
        TrainState { step: 0, params, lr, history: Vec::new() }
    }
}

/// Training stopped early; `state` holds the last finite step.
#[derive(Debug, Clone, thiserror::Error)]
#[error("training aborted at step {}: {error}", state.step)]
pub struct TrainAbort {
    pub state: Box<TrainState>,
    pub error: Error,
}

/// Plain gradient descent with per-group step sizes.
///
/// Step `s` uses `data[s % data.len()]`. The loss recorded for a step is the
/// loss before its update.
pub fn train(
    steps: usize,
    mut state: TrainState,
    cfg: &ModelConfig,
    data: &[Instance],
) -> std::result::Result<TrainState, TrainAbort> {
    if steps == 0 || data.is_empty() {
        let error = Error::Argument { op: "train", detail: "need steps ≥ 1 and at least one instance".into() };
        return Err(TrainAbort { state: Box::new(state), error });
    }
    for _ in 0..steps {
        let inst = &data[state.step % data.len()];
        let (loss, grads) = match step_grads(cfg, &state.params, inst) {
            Ok(v) => v,
            Err(error) => return Err(TrainAbort { state: Box::new(state), error }),
        };
        let mut next = state.params.clone();
        apply_update(&mut next, &grads, &state.lr);
        let flat = next.flatten();
        if let Some((name, ..)) =
            next.layout().into_iter().find(|(_, _, off, len)| flat[*off..off + len].iter().any(|v| !v.is_finite()))
        {
            let error = Error::Numeric { op: "train", detail: format!("update made {name} non-finite") };
            return Err(TrainAbort { state: Box::new(state), error });
        }
        state.params = next;
        state.history.push(LossRecord { step: state.step, total: loss.total, seg: loss.seg, align: loss.align });
        state.step += 1;
    }
    Ok(state)
}

fn step_grads(cfg: &ModelConfig, params: &ModelParams, inst: &Instance) -> Result<(super::LossBreakdown, ModelParams)> {
    let (loss, grads) = loss_and_grad(cfg, params, inst)?;
    if !loss.total.is_finite() {
        return Err(Error::Numeric { op: "train", detail: format!("non-finite loss {}", loss.total) });
    }
    let flat = grads.flatten();
    if let Some(i) = flat.iter().position(|g| !g.is_finite()) {
        let (name, ..) = grads
            .layout()
            .into_iter()
            .find(|(_, _, off, len)| (*off..off + len).contains(&i))
            .expect("offset inside layout");
        return Err(Error::Numeric { op: "train", detail: format!("non-finite gradient in {name}") });
    }
    Ok((loss, grads))
}

fn apply_update(params: &mut ModelParams, grads: &ModelParams, lr: &LearningRates) {
    let flat = grads.flatten();
    let mut pos = 0;
    params.visit_mut("", &mut |_, group, values| {
        let rate = lr.for_group(group);
        if rate == 0.0 {
            pos += values.len();
            return;
        }
        for v in values.iter_mut() {
            *v -= rate * flat[pos];
            pos += 1;
        }
    });
}
