//! Cross-attention baseline, the differential attention primitive, the
//! cascaded agent attention (agents query text, then visual tokens query
//! agents), and the mean attention distance diagnostic.
//!
//! Every forward function that participates in training has a matching
//! `*_backward` taking the forward cache and the upstream gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    layer_norm_rows, layer_norm_rows_backward, softmax_rows, softmax_rows_backward, Matrix, Rng,
};

pub const DEFAULT_LAMBDA_INIT: f64 = 0.5;

/// One of the three projected matrices of a visual attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttnMatrix {
    Q,
    K,
    V,
}

impl AttnMatrix {
    pub const ALL: [AttnMatrix; 3] = [AttnMatrix::Q, AttnMatrix::K, AttnMatrix::V];

    pub fn letter(self) -> char {
        match self {
            AttnMatrix::Q => 'Q',
            AttnMatrix::K => 'K',
            AttnMatrix::V => 'V',
        }
    }

    fn from_letter(c: char) -> Option<Self> {
        match c {
            'Q' => Some(AttnMatrix::Q),
            'K' => Some(AttnMatrix::K),
            'V' => Some(AttnMatrix::V),
            _ => None,
        }
    }
}

/// Routes the selection inputs: the affinity is computed against
/// `affinity` and the agents are gathered from `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wiring {
    pub affinity: AttnMatrix,
    pub target: AttnMatrix,
}

impl Default for Wiring {
    fn default() -> Self {
        Wiring { affinity: AttnMatrix::K, target: AttnMatrix::V }
    }
}

impl Wiring {
    /// All nine source/target pairs.
    pub fn all() -> Vec<Wiring> {
        AttnMatrix::ALL
            .iter()
            .flat_map(|&affinity| AttnMatrix::ALL.iter().map(move |&target| Wiring { affinity, target }))
            .collect()
    }

    pub fn code(&self) -> String {
        format!("{}{}", self.affinity.letter(), self.target.letter())
    }
}

impl std::fmt::Display for Wiring {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.code())
    }
}

impl std::str::FromStr for Wiring {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let chars: Vec<char> = s.chars().collect();
        match chars.as_slice() {
            [a, t] => match (AttnMatrix::from_letter(*a), AttnMatrix::from_letter(*t)) {
                (Some(affinity), Some(target)) => Ok(Wiring { affinity, target }),
                _ => Err(format!("invalid wiring `{s}` (letters must be Q, K or V)")),
            },
            _ => Err(format!("invalid wiring `{s}` (expected a two-letter code such as KV)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub lambda_init: f64,
    pub heads: usize,
    /// Layer-normalize the inputs of each differential block.
    pub pre_norm: bool,
    pub wiring: Wiring,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { lambda_init: DEFAULT_LAMBDA_INIT, heads: 1, pre_norm: false, wiring: Wiring::default() }
    }
}

/// Learnable tensors of one differential attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffAttnParams {
    /// `d×2d`
    pub w_q: Matrix,
    /// `d×2d`
    pub w_k: Matrix,
    /// `d×2d`
    pub w_v: Matrix,
    /// `2d×d`, restores the width of the attended values.
    pub w_o: Matrix,
    pub lambda: f64,
}

impl DiffAttnParams {
    pub fn zeros(dim: usize) -> Self {
        DiffAttnParams {
            w_q: Matrix::zeros(dim, 2 * dim),
            w_k: Matrix::zeros(dim, 2 * dim),
            w_v: Matrix::zeros(dim, 2 * dim),
            w_o: Matrix::zeros(2 * dim, dim),
            lambda: 0.0,
        }
    }

    /// Gaussian projections scaled by fan-in. With `zero_output` the output
    /// map starts at zero, so the block initially contributes nothing.
    pub fn init(dim: usize, lambda: f64, zero_output: bool, rng: &mut Rng) -> Self {
        let s_in = 1.0 / (dim as f64).sqrt();
        let w_o = if zero_output {
            Matrix::zeros(2 * dim, dim)
        } else {
            rng.normal_matrix(2 * dim, dim, 1.0 / (2.0 * dim as f64).sqrt())
        };
        DiffAttnParams {
            w_q: rng.normal_matrix(dim, 2 * dim, s_in),
            w_k: rng.normal_matrix(dim, 2 * dim, s_in),
            w_v: rng.normal_matrix(dim, 2 * dim, s_in),
            w_o,
            lambda,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    fn check(&self, dim: usize) -> Result<()> {
        let expect = [
            ("w_q", &self.w_q, (dim, 2 * dim)),
            ("w_k", &self.w_k, (dim, 2 * dim)),
            ("w_v", &self.w_v, (dim, 2 * dim)),
            ("w_o", &self.w_o, (2 * dim, dim)),
        ];
        for (name, m, shape) in expect {
            if m.shape() != shape {
                return Err(Error::shape(
                    "diff_attn",
                    format!("{name} is {:?}, expected {shape:?}", m.shape()),
                ));
            }
        }
        if !self.lambda.is_finite() {
            return Err(Error::numeric("diff_attn", "lambda is not finite"));
        }
        Ok(())
    }
}

/// Both blocks of the cascade: agent–text, then visual–agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentAttnParams {
    pub block1: DiffAttnParams,
    pub block2: DiffAttnParams,
}

impl AgentAttnParams {
    /// Second block's output map is zero, so the cascade starts as the
    /// residual identity.
    pub fn init(dim: usize, lambda: f64, rng: &mut Rng) -> Self {
        AgentAttnParams {
            block1: DiffAttnParams::init(dim, lambda, false, rng),
            block2: DiffAttnParams::init(dim, lambda, true, rng),
        }
    }
}

/// Softmax weights of one head: the positive and the subtracted branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub positive: Matrix,
    pub negative: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnRecord {
    pub heads: Vec<HeadWeights>,
    pub lambda: f64,
}

impl AttnRecord {
    /// `positive − λ·negative`, averaged over heads.
    pub fn differential(&self) -> Matrix {
        let mut out = Matrix::zeros(self.heads[0].positive.rows(), self.heads[0].positive.cols());
        let w = 1.0 / self.heads.len() as f64;
        for h in &self.heads {
            out.add_scaled(&h.positive, w).expect("head shapes agree");
            out.add_scaled(&h.negative, -self.lambda * w).expect("head shapes agree");
        }
        out
    }
}

/// `softmax(q·kvᵀ/√d)·kv`.
pub fn cross_attn(q_src: &Matrix, kv_src: &Matrix) -> Result<Matrix> {
    Ok(cross_attn_weights(q_src, kv_src)?.matmul(kv_src)?)
}

/// The softmax weights used by [`cross_attn`].
pub fn cross_attn_weights(q_src: &Matrix, kv_src: &Matrix) -> Result<Matrix> {
    if q_src.cols() != kv_src.cols() {
        return Err(Error::shape(
            "cross_attn",
            format!("query width {} vs key width {}", q_src.cols(), kv_src.cols()),
        ));
    }
    let scale = 1.0 / (q_src.cols() as f64).sqrt();
    Ok(softmax_rows(&q_src.matmul_t(kv_src)?.scale(scale)))
}

/// Shape knobs shared by every differential block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiffAttnOptions {
    pub heads: usize,
    pub pre_norm: bool,
}

impl Default for DiffAttnOptions {
    fn default() -> Self {
        DiffAttnOptions { heads: 1, pre_norm: false }
    }
}

impl From<&AttentionConfig> for DiffAttnOptions {
    fn from(cfg: &AttentionConfig) -> Self {
        DiffAttnOptions { heads: cfg.heads, pre_norm: cfg.pre_norm }
    }
}

#[derive(Debug, Clone)]
pub struct DiffAttnCache {
    raw: [Matrix; 3],
    inputs: [Matrix; 3],
    q: Matrix,
    k: Matrix,
    v: Matrix,
    diffs: Vec<Matrix>,
    attended: Matrix,
    record: AttnRecord,
    opts: DiffAttnOptions,
}

/// `(softmax(Q₁K₁ᵀ/√d) − λ·softmax(Q₂K₂ᵀ/√d))·V′·W_o` with
/// `[Q₁;Q₂] = q·W_q`, `[K₁;K₂] = k·W_k`, `V′ = v·W_v`.
///
/// With several heads, each half of the projected queries and keys and the
/// projected values are split into equal column groups, and `d` in the
/// scale becomes the per-head width.
pub fn diff_attn(
    q_src: &Matrix,
    k_src: &Matrix,
    v_src: &Matrix,
    p: &DiffAttnParams,
    opts: DiffAttnOptions,
) -> Result<(Matrix, AttnRecord)> {
    let (out, cache) = diff_attn_forward(q_src, k_src, v_src, p, opts)?;
    Ok((out, cache.record))
}

pub fn diff_attn_forward(
    q_src: &Matrix,
    k_src: &Matrix,
    v_src: &Matrix,
    p: &DiffAttnParams,
    opts: DiffAttnOptions,
) -> Result<(Matrix, DiffAttnCache)> {
    const OP: &str = "diff_attn";
    let d = q_src.cols();
    if k_src.cols() != d || v_src.cols() != d {
        return Err(Error::shape(
            OP,
            format!("widths q={d}, k={}, v={}", k_src.cols(), v_src.cols()),
        ));
    }
    if k_src.rows() != v_src.rows() {
        return Err(Error::shape(
            OP,
            format!("{} keys vs {} values", k_src.rows(), v_src.rows()),
        ));
    }
    p.check(d)?;
    if opts.heads == 0 || d % opts.heads != 0 {
        return Err(Error::argument(OP, format!("{} heads do not divide width {d}", opts.heads)));
    }
    let raw = [q_src.clone(), k_src.clone(), v_src.clone()];
    let inputs = if opts.pre_norm {
        [layer_norm_rows(q_src), layer_norm_rows(k_src), layer_norm_rows(v_src)]
    } else {
        raw.clone()
    };
    let q = inputs[0].matmul(&p.w_q)?;
    let k = inputs[1].matmul(&p.w_k)?;
    let v = inputs[2].matmul(&p.w_v)?;

    let dh = d / opts.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attended = Matrix::zeros(q.rows(), 2 * d);
    let mut heads = Vec::with_capacity(opts.heads);
    let mut diffs = Vec::with_capacity(opts.heads);
    for h in 0..opts.heads {
        let s1 = q.col_block(h * dh, dh).matmul_t(&k.col_block(h * dh, dh))?.scale(scale);
        let s2 = q.col_block(d + h * dh, dh).matmul_t(&k.col_block(d + h * dh, dh))?.scale(scale);
        let positive = softmax_rows(&s1);
        let negative = softmax_rows(&s2);
        let mut diff = positive.clone();
        diff.add_scaled(&negative, -p.lambda)?;
        attended.set_col_block(2 * h * dh, &diff.matmul(&v.col_block(2 * h * dh, 2 * dh))?);
        heads.push(HeadWeights { positive, negative });
        diffs.push(diff);
    }
    let out = attended.matmul(&p.w_o)?;
    out.ensure_finite(OP)?;
    let record = AttnRecord { heads, lambda: p.lambda };
    Ok((out, DiffAttnCache { raw, inputs, q, k, v, diffs, attended, record, opts }))
}

impl DiffAttnCache {
    pub fn record(&self) -> &AttnRecord {
        &self.record
    }
}

/// Gradients of one differential block.
#[derive(Debug, Clone)]
pub struct DiffAttnGrads {
    pub q_src: Matrix,
    pub k_src: Matrix,
    pub v_src: Matrix,
    pub params: DiffAttnParams,
}

pub fn diff_attn_backward(
    cache: &DiffAttnCache,
    p: &DiffAttnParams,
    grad_out: &Matrix,
) -> Result<DiffAttnGrads> {
    let d = p.dim();
    let heads = cache.opts.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let w_o = cache.attended.t_matmul(grad_out)?;
    let d_attended = grad_out.matmul_t(&p.w_o)?;

    let mut d_q = Matrix::zeros(cache.q.rows(), 2 * d);
    let mut d_k = Matrix::zeros(cache.k.rows(), 2 * d);
    let mut d_v = Matrix::zeros(cache.v.rows(), 2 * d);
    let mut d_lambda = 0.0;
    for h in 0..heads {
        let weights = &cache.record.heads[h];
        let d_head = d_attended.col_block(2 * h * dh, 2 * dh);
        let v_head = cache.v.col_block(2 * h * dh, 2 * dh);
        let d_diff = d_head.matmul_t(&v_head)?;
        d_v.set_col_block(2 * h * dh, &cache.diffs[h].t_matmul(&d_head)?);
        d_lambda -= d_diff.dot(&weights.negative);

        let branches = [
            (0, softmax_rows_backward(&weights.positive, &d_diff)),
            (d, softmax_rows_backward(&weights.negative, &d_diff.scale(-p.lambda))),
        ];
        for (offset, d_scores) in branches {
            let d_scores = d_scores.scale(scale);
            let q_blk = cache.q.col_block(offset + h * dh, dh);
            let k_blk = cache.k.col_block(offset + h * dh, dh);
            d_q.set_col_block(offset + h * dh, &d_scores.matmul(&k_blk)?);
            d_k.set_col_block(offset + h * dh, &d_scores.t_matmul(&q_blk)?);
        }
    }

    let params = DiffAttnParams {
        w_q: cache.inputs[0].t_matmul(&d_q)?,
        w_k: cache.inputs[1].t_matmul(&d_k)?,
        w_v: cache.inputs[2].t_matmul(&d_v)?,
        w_o,
        lambda: d_lambda,
    };
    let mut d_in = [d_q.matmul_t(&p.w_q)?, d_k.matmul_t(&p.w_k)?, d_v.matmul_t(&p.w_v)?];
    if cache.opts.pre_norm {
        for (g, raw) in d_in.iter_mut().zip(&cache.raw) {
            *g = layer_norm_rows_backward(raw, g);
        }
    }
    let [q_src, k_src, v_src] = d_in;
    Ok(DiffAttnGrads { q_src, k_src, v_src, params })
}

/// Records of both blocks of one agent attention call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentAttnRecord {
    /// agents × categories
    pub agent_text: AttnRecord,
    /// visual tokens × agents
    pub visual_agent: AttnRecord,
}

impl AgentAttnRecord {
    /// Effective visual-to-text map through the agents, `N×Nc`.
    pub fn visual_to_text(&self) -> Result<Matrix> {
        self.visual_agent.differential().matmul(&self.agent_text.differential())
    }
}

#[derive(Debug, Clone)]
pub struct AgentAttnCache {
    block1: DiffAttnCache,
    block2: DiffAttnCache,
}

impl AgentAttnCache {
    pub fn record(&self) -> AgentAttnRecord {
        AgentAttnRecord {
            agent_text: self.block1.record.clone(),
            visual_agent: self.block2.record.clone(),
        }
    }
}

/// `f_v + DiffAttn(f_v, f_x, DiffAttn(f_x, f_t, f_t))`.
pub fn agent_attention(
    f_v: &Matrix,
    f_x: &Matrix,
    f_t: &Matrix,
    p: &AgentAttnParams,
    opts: DiffAttnOptions,
) -> Result<(Matrix, AgentAttnRecord)> {
    let (out, cache) = agent_attention_forward(f_v, f_x, f_t, p, opts)?;
    Ok((out, cache.record()))
}

pub fn agent_attention_forward(
    f_v: &Matrix,
    f_x: &Matrix,
    f_t: &Matrix,
    p: &AgentAttnParams,
    opts: DiffAttnOptions,
) -> Result<(Matrix, AgentAttnCache)> {
    let (v_x, block1) = diff_attn_forward(f_x, f_t, f_t, &p.block1, opts)?;
    let (delta, block2) = diff_attn_forward(f_v, f_x, &v_x, &p.block2, opts)?;
    let out = f_v.add(&delta)?;
    Ok((out, AgentAttnCache { block1, block2 }))
}

#[derive(Debug, Clone)]
pub struct AgentAttnGrads {
    pub f_v: Matrix,
    pub f_x: Matrix,
    pub f_t: Matrix,
    pub params: AgentAttnParams,
}

pub fn agent_attention_backward(
    cache: &AgentAttnCache,
    p: &AgentAttnParams,
    grad_out: &Matrix,
) -> Result<AgentAttnGrads> {
    let g2 = diff_attn_backward(&cache.block2, &p.block2, grad_out)?;
    let g1 = diff_attn_backward(&cache.block1, &p.block1, &g2.v_src)?;
    let f_v = grad_out.add(&g2.q_src)?;
    let f_x = g2.k_src.add(&g1.q_src)?;
    let f_t = g1.k_src.add(&g1.v_src)?;
    Ok(AgentAttnGrads {
        f_v,
        f_x,
        f_t,
        params: AgentAttnParams { block1: g1.params, block2: g2.params },
    })
}

/// Attention-weighted mean grid distance between queries and keys.
///
/// Token `i` sits at column `i % grid_w`, row `i / grid_w` with unit
/// spacing. Rows of `weights` must sum to 1 within `1e-9`.
pub fn mean_attention_distance(weights: &Matrix, grid_w: usize, grid_h: usize) -> Result<f64> {
    const OP: &str = "mean_attention_distance";
    let n = grid_w * grid_h;
    if weights.rows() != n || weights.cols() != n {
        return Err(Error::argument(
            OP,
            format!("weights {:?} do not match a {grid_w}x{grid_h} grid", weights.shape()),
        ));
    }
    if let Some((r, s)) = weights
        .row_sums()
        .into_iter()
        .enumerate()
        .find(|(_, s)| (s - 1.0).abs() > 1e-9)
    {
        return Err(Error::argument(OP, format!("row {r} sums to {s}, expected 1")));
    }
    let pos = |i: usize| ((i % grid_w) as f64, (i / grid_w) as f64);
    let mut total = 0.0;
    for i in 0..n {
        let (xi, yi) = pos(i);
        for j in 0..n {
            let (xj, yj) = pos(j);
            total += weights[(i, j)] * ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt();
        }
    }
    Ok(total / n as f64)
}
