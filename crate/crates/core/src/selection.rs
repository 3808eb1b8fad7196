//! Agent selection: a refined text-to-key affinity matrix, top-k category
//! channels, per-channel token picks gathered from the value matrix, and
//! mask-token replacement of repeated picks.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gather_rows, l2_normalize_rows, sigmoid, topk, IndexList, Matrix, Rng, NORM_EPS};
use crate::transport::{self, TransportConfig, TransportPlan};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_Q: usize = 4;

/// How agent tokens are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    /// Uniformly sampled distinct value rows.
    Random,
    /// Free trainable agent rows, no prior.
    LearnableInit,
    /// Affinity from `sigmoid(cos)` only.
    CosineOnly,
    /// Affinity from `sigmoid(P*)` only.
    OtOnly,
    /// Affinity from `sigmoid(P* ⊙ cos)`.
    Combined,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 5] = [
        SelectionStrategy::Random,
        SelectionStrategy::LearnableInit,
        SelectionStrategy::CosineOnly,
        SelectionStrategy::OtOnly,
        SelectionStrategy::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionStrategy::Random => "random",
            SelectionStrategy::LearnableInit => "learnable-init",
            SelectionStrategy::CosineOnly => "cosine-only",
            SelectionStrategy::OtOnly => "ot-only",
            SelectionStrategy::Combined => "combined",
        }
    }
}

impl std::str::FromStr for SelectionStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        SelectionStrategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                format!(
                    "unknown selection strategy `{s}` (expected random|learnable-init|cosine-only|ot-only|combined)"
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub strategy: SelectionStrategy,
    pub k: usize,
    pub q: usize,
    /// Pick the highest-affinity tokens per channel instead of the lowest.
    pub largest: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig { strategy: SelectionStrategy::Combined, k: DEFAULT_K, q: DEFAULT_Q, largest: false }
    }
}

impl SelectionConfig {
    pub fn agent_count(&self) -> usize {
        self.k * self.q
    }
}

/// Which quantities produced an affinity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AffinitySource {
    PlanTimesCosine,
    CosineOnly,
    PlanOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    /// `Nc×N`, entries strictly inside `(0, 1)`.
    pub values: Matrix,
    pub source: AffinitySource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSelection {
    /// Selected category channels, best first. Empty for prior-free strategies.
    pub channel_idx: IndexList,
    /// Token positions picked for each channel (or each group of `q`).
    pub token_idx: Vec<IndexList>,
    /// `true` where the row was replaced by the mask token.
    pub dedup_mask: Vec<bool>,
    /// `(k·q)×d` agent rows.
    pub agents: Matrix,
}

impl AgentSelection {
    /// Source token index per agent row, in row order.
    pub fn source_indices(&self) -> Vec<usize> {
        self.token_idx.iter().flat_map(|l| l.iter().copied()).collect()
    }

    /// Whether any two unmasked rows point at the same value row.
    pub fn has_unmasked_duplicates(&self) -> bool {
        let mut seen = HashSet::new();
        self.source_indices()
            .into_iter()
            .zip(&self.dedup_mask)
            .filter(|(_, &masked)| !masked)
            .any(|(i, _)| !seen.insert(i))
    }
}

/// Elementwise cosine similarity between text rows and key rows.
pub fn cosine_similarity(text: &Matrix, key: &Matrix) -> Result<Matrix> {
    if text.cols() != key.cols() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("text width {} vs key width {}", text.cols(), key.cols()),
        ));
    }
    l2_normalize_rows(text, NORM_EPS).matmul_t(&l2_normalize_rows(key, NORM_EPS))
}

/// `A = sigmoid(P* ⊙ cos(text, key))`.
pub fn affinity(text: &Matrix, key: &Matrix, plan: &TransportPlan) -> Result<AffinityMatrix> {
    let sim = cosine_similarity(text, key)?;
    if plan.plan.shape() != sim.shape() {
        return Err(Error::shape(
            "affinity",
            format!("plan {:?} vs similarity {:?}", plan.plan.shape(), sim.shape()),
        ));
    }
    let values = plan.plan.hadamard(&sim)?.map(sigmoid);
    Ok(AffinityMatrix { values, source: AffinitySource::PlanTimesCosine })
}

pub fn cosine_affinity(text: &Matrix, key: &Matrix) -> Result<AffinityMatrix> {
    let values = cosine_similarity(text, key)?.map(sigmoid);
    Ok(AffinityMatrix { values, source: AffinitySource::CosineOnly })
}

pub fn plan_affinity(plan: &TransportPlan) -> AffinityMatrix {
    AffinityMatrix { values: plan.plan.map(sigmoid), source: AffinitySource::PlanOnly }
}

/// Top-`k` category channels by mean affinity, with their rows `A*`.
pub fn select_channels(a: &AffinityMatrix, k: usize) -> Result<(IndexList, Matrix)> {
    let means = a.values.row_means();
    if k > means.len() {
        return Err(Error::argument(
            "select_channels",
            format!("k = {k} exceeds {} categories", means.len()),
        ));
    }
    let idx = topk(&means, k, true)?;
    let rows = gather_rows(&a.values, &idx)?;
    Ok((idx, rows))
}

/// Picks `q` tokens per row of `A*` and gathers them from `value`.
///
/// Rows are visited channel-major; a token position already used by an
/// earlier agent row is replaced by `mask_token` and flagged. The returned
/// `channel_idx` holds row positions within `a_star`.
pub fn select_tokens(
    a_star: &Matrix,
    value: &Matrix,
    q: usize,
    mask_token: &[f64],
    largest: bool,
) -> Result<AgentSelection> {
    const OP: &str = "select_tokens";
    if a_star.cols() != value.rows() {
        return Err(Error::shape(
            OP,
            format!("affinity has {} tokens, value has {}", a_star.cols(), value.rows()),
        ));
    }
    if mask_token.len() != value.cols() {
        return Err(Error::shape(
            OP,
            format!("mask token width {} vs value width {}", mask_token.len(), value.cols()),
        ));
    }
    if q > value.rows() {
        return Err(Error::argument(OP, format!("q = {q} exceeds {} tokens", value.rows())));
    }
    let mut token_idx = Vec::with_capacity(a_star.rows());
    for c in 0..a_star.rows() {
        token_idx.push(topk(a_star.row(c), q, largest)?);
    }
    let (agents, dedup_mask) = gather_with_dedup(value, &token_idx, mask_token)?;
    Ok(AgentSelection {
        channel_idx: IndexList((0..a_star.rows()).collect()),
        token_idx,
        dedup_mask,
        agents,
    })
}

fn gather_with_dedup(
    value: &Matrix,
    token_idx: &[IndexList],
    mask_token: &[f64],
) -> Result<(Matrix, Vec<bool>)> {
    let total: usize = token_idx.iter().map(|l| l.len()).sum();
    let mut agents = Matrix::zeros(total, value.cols());
    let mut mask = Vec::with_capacity(total);
    let mut used = HashSet::new();
    let mut row = 0;
    for list in token_idx {
        list.check_bound(value.rows(), "gather_with_dedup")?;
        for &t in list.iter() {
            let dup = !used.insert(t);
            let src = if dup { mask_token } else { value.row(t) };
            agents.row_mut(row).copy_from_slice(src);
            mask.push(dup);
            row += 1;
        }
    }
    Ok((agents, mask))
}

/// Everything a selection strategy may need. Fields a strategy does not use
/// are ignored; a missing required field is an argument error.
#[derive(Debug, Clone, Copy)]
pub struct SelectionInputs<'a> {
    pub text: &'a Matrix,
    pub key: &'a Matrix,
    pub value: &'a Matrix,
    pub mask_token: &'a [f64],
    pub transport: &'a TransportConfig,
    pub learnable: Option<&'a Matrix>,
    pub seed: u64,
}

/// Result of a selection strategy, with the intermediates that produced it.
#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub selection: AgentSelection,
    pub plan: Option<TransportPlan>,
    pub affinity: Option<AffinityMatrix>,
}

/// Runs one selection strategy end to end.
pub fn select_agents(cfg: &SelectionConfig, inputs: SelectionInputs<'_>) -> Result<SelectionOutcome> {
    const OP: &str = "select_agents";
    let SelectionConfig { strategy, k, q, largest } = *cfg;
    let n_agents = k * q;
    match strategy {
        SelectionStrategy::Random => {
            if n_agents > inputs.value.rows() {
                return Err(Error::argument(
                    OP,
                    format!("random selection needs k·q = {n_agents} ≤ {} tokens", inputs.value.rows()),
                ));
            }
            let picks = Rng::new(inputs.seed).distinct(inputs.value.rows(), n_agents);
            let token_idx: Vec<IndexList> =
                picks.chunks(q.max(1)).map(|c| IndexList(c.to_vec())).collect();
            let (agents, dedup_mask) = gather_with_dedup(inputs.value, &token_idx, inputs.mask_token)?;
            Ok(SelectionOutcome {
                selection: AgentSelection { channel_idx: IndexList::default(), token_idx, dedup_mask, agents },
                plan: None,
                affinity: None,
            })
        }
        SelectionStrategy::LearnableInit => {
            let rows = inputs
                .learnable
                .ok_or_else(|| Error::argument(OP, "learnable-init strategy needs learnable agent rows"))?;
            if rows.shape() != (n_agents, inputs.value.cols()) {
                return Err(Error::shape(
                    OP,
                    format!("learnable agents {:?}, expected ({n_agents}, {})", rows.shape(), inputs.value.cols()),
                ));
            }
            Ok(SelectionOutcome {
                selection: AgentSelection {
                    channel_idx: IndexList::default(),
                    token_idx: Vec::new(),
                    dedup_mask: vec![false; n_agents],
                    agents: rows.clone(),
                },
                plan: None,
                affinity: None,
            })
        }
        SelectionStrategy::CosineOnly | SelectionStrategy::OtOnly | SelectionStrategy::Combined => {
            let (plan, aff) = match strategy {
                SelectionStrategy::CosineOnly => (None, cosine_affinity(inputs.text, inputs.key)?),
                SelectionStrategy::OtOnly => {
                    let plan = transport::solve(inputs.text, inputs.key, inputs.transport)?;
                    let aff = plan_affinity(&plan);
                    (Some(plan), aff)
                }
                _ => {
                    let plan = transport::solve(inputs.text, inputs.key, inputs.transport)?;
                    let aff = affinity(inputs.text, inputs.key, &plan)?;
                    (Some(plan), aff)
                }
            };
            let (channel_idx, a_star) = select_channels(&aff, k)?;
            let mut selection = select_tokens(&a_star, inputs.value, q, inputs.mask_token, largest)?;
            selection.channel_idx = channel_idx;
            Ok(SelectionOutcome { selection, plan, affinity: Some(aff) })
        }
    }
}
