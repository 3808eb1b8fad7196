//! The toy visual encoder with an agent block after every layer, its
//! parameter container, and the analytic backward pass of the total loss.
//!
//! Each of the `L` layers is a frozen-key residual self-attention followed
//! by the agent block (selection → pooling → agent attention). Selection
//! indices and pooling masks are recomputed on every forward pass and
//! treated as constants by the backward pass.

use serde::{Deserialize, Serialize};

use super::losses::{align_loss_grad, seg_loss_grad, total_loss, LossParams, TAU_SEG};
use super::synthetic::Instance;
use super::text::{project_text, project_text_backward, ProjectedText, TextProjector};
use crate::attention::{
    agent_attention_backward, agent_attention_forward, AgentAttnCache, AgentAttnParams, AgentAttnRecord,
    AttentionConfig, AttnMatrix, DiffAttnOptions,
};
use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, softmax_rows_backward, Matrix, Rng};
use crate::pooling::{pool_variant, pool_variant_backward, PoolingCache, PoolingConfig, PoolingParams};
use crate::selection::{select_agents, SelectionConfig, SelectionInputs, SelectionOutcome, SelectionStrategy};
use crate::transport::TransportConfig;

/// Default initial value of both alignment temperatures.
pub const TAU_INIT: f64 = 0.07;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub text_dim: usize,
    pub layers: usize,
    /// One agent block reused by every layer.
    pub shared_layers: bool,
    /// Run the toy self-attention before each agent block. Without it the
    /// layer input serves as Q, K and V.
    pub backbone: bool,
    pub text_attention: bool,
    pub tau_seg: f64,
    pub tau_init: f64,
    pub transport: TransportConfig,
    pub selection: SelectionConfig,
    pub pooling: PoolingConfig,
    pub attention: AttentionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 16,
            text_dim: 24,
            layers: 2,
            shared_layers: true,
            backbone: true,
            text_attention: true,
            tau_seg: TAU_SEG,
            tau_init: TAU_INIT,
            transport: TransportConfig::default(),
            selection: SelectionConfig::default(),
            pooling: PoolingConfig::default(),
            attention: AttentionConfig::default(),
        }
    }
}

/// Learning-rate group of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Newly introduced modules: agent blocks, text projector, temperatures.
    Decoder,
    /// Fine-tuned query/value maps of the toy encoder.
    Backbone,
}

/// Named flat views over a set of tensors.
pub trait ParamSet: Clone {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &mut [f64]));

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.clone().visit_mut("", &mut |_, _, s| out.extend_from_slice(s));
        out
    }

    fn load(&mut self, flat: &[f64]) {
        let mut pos = 0;
        self.visit_mut("", &mut |_, _, s| {
            s.copy_from_slice(&flat[pos..pos + s.len()]);
            pos += s.len();
        });
        assert_eq!(pos, flat.len(), "flat parameter vector length mismatch");
    }

    fn accumulate(&mut self, other: &Self) {
        let flat = other.flatten();
        let mut pos = 0;
        self.visit_mut("", &mut |_, _, s| {
            for v in s.iter_mut() {
                *v += flat[pos];
                pos += 1;
            }
        });
    }

    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, _, s| s.fill(0.0));
        z
    }

    fn param_count(&self) -> usize {
        self.flatten().len()
    }

    /// `(name, group, offset, len)` for every tensor in flatten order.
    fn layout(&self) -> Vec<(String, ParamGroup, usize, usize)> {
        let mut out = Vec::new();
        let mut pos = 0;
        self.clone().visit_mut("", &mut |name, group, s| {
            out.push((name.to_string(), group, pos, s.len()));
            pos += s.len();
        });
        out
    }
}

fn visit_attn(p: &mut crate::attention::DiffAttnParams, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &mut [f64])) {
    let g = ParamGroup::Decoder;
    f(&format!("{prefix}.w_q"), g, p.w_q.as_mut_slice());
    f(&format!("{prefix}.w_k"), g, p.w_k.as_mut_slice());
    f(&format!("{prefix}.w_v"), g, p.w_v.as_mut_slice());
    f(&format!("{prefix}.w_o"), g, p.w_o.as_mut_slice());
    f(&format!("{prefix}.lambda"), g, std::slice::from_mut(&mut p.lambda));
}

/// One agent block: cascade attention, pooling, mask token and (for the
/// learnable-init strategy) the free agent rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XAgentParams {
    pub attn: AgentAttnParams,
    pub pooling: PoolingParams,
    pub mask_token: Vec<f64>,
    pub learnable_agents: Option<Matrix>,
}

impl XAgentParams {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let learnable_agents = (cfg.selection.strategy == SelectionStrategy::LearnableInit)
            .then(|| rng.normal_matrix(cfg.selection.agent_count(), cfg.dim, 1.0));
        XAgentParams {
            attn: AgentAttnParams::init(cfg.dim, cfg.attention.lambda_init, rng),
            pooling: PoolingParams::new(cfg.dim, cfg.pooling.gamma_init),
            mask_token: vec![0.0; cfg.dim],
            learnable_agents,
        }
    }
}

impl ParamSet for XAgentParams {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &mut [f64])) {
        let g = ParamGroup::Decoder;
        visit_attn(&mut self.attn.block1, &format!("{prefix}block1"), f);
        visit_attn(&mut self.attn.block2, &format!("{prefix}block2"), f);
        let p = &mut self.pooling;
        f(&format!("{prefix}pooling.proj_v"), g, p.proj_v.as_mut_slice());
        f(&format!("{prefix}pooling.proj_t"), g, p.proj_t.as_mut_slice());
        f(&format!("{prefix}pooling.gamma_v"), g, std::slice::from_mut(&mut p.gamma_v));
        f(&format!("{prefix}pooling.gamma_t"), g, std::slice::from_mut(&mut p.gamma_t));
        f(&format!("{prefix}pooling.gamma_single"), g, std::slice::from_mut(&mut p.gamma_single));
        f(&format!("{prefix}mask_token"), g, &mut self.mask_token);
        if let Some(a) = self.learnable_agents.as_mut() {
            f(&format!("{prefix}learnable_agents"), g, a.as_mut_slice());
        }
    }
}

/// Residual self-attention of one toy encoder layer. The key map is frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneLayer {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl BackboneLayer {
    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        BackboneLayer {
            w_q: rng.normal_matrix(dim, dim, s),
            w_k: rng.normal_matrix(dim, dim, s),
            w_v: rng.normal_matrix(dim, dim, s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub text: TextProjector,
    pub loss: LossParams,
    /// One entry when layers share the agent block, else one per layer.
    pub blocks: Vec<XAgentParams>,
    pub backbone: Vec<BackboneLayer>,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let root = Rng::new(seed);
        let mut rng = root.fork(0x7e47);
        let text = TextProjector::init(cfg.text_dim, cfg.dim, cfg.text_attention, &mut rng);
        let mut rng = root.fork(0xb10c);
        let n_blocks = if cfg.shared_layers { 1 } else { cfg.layers };
        let blocks = (0..n_blocks).map(|_| XAgentParams::init(cfg, &mut rng)).collect();
        let mut rng = root.fork(0xbb0e);
        let backbone = (0..cfg.layers).map(|_| BackboneLayer::init(cfg.dim, &mut rng)).collect();
        ModelParams { text, loss: LossParams::new(cfg.tau_init, cfg.tau_init), blocks, backbone }
    }

    pub fn block_for(&self, layer: usize) -> &XAgentParams {
        &self.blocks[if self.blocks.len() == 1 { 0 } else { layer }]
    }

    fn block_index(&self, layer: usize) -> usize {
        if self.blocks.len() == 1 {
            0
        } else {
            layer
        }
    }
}

impl ParamSet for ModelParams {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &mut [f64])) {
        let d = ParamGroup::Decoder;
        f(&format!("{prefix}text.out_map"), d, self.text.out_map.as_mut_slice());
        f(&format!("{prefix}text.phi"), d, self.text.phi.as_mut_slice());
        f(&format!("{prefix}loss.log_tau1"), d, std::slice::from_mut(&mut self.loss.log_tau1));
        f(&format!("{prefix}loss.log_tau2"), d, std::slice::from_mut(&mut self.loss.log_tau2));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}xagent[{i}]."), f);
        }
        for (i, l) in self.backbone.iter_mut().enumerate() {
            f(&format!("{prefix}backbone[{i}].w_q"), ParamGroup::Backbone, l.w_q.as_mut_slice());
            f(&format!("{prefix}backbone[{i}].w_v"), ParamGroup::Backbone, l.w_v.as_mut_slice());
        }
    }
}

#[derive(Debug, Clone)]
struct BackboneCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    weights: Matrix,
}

fn backbone_forward(x: &Matrix, layer: &BackboneLayer) -> Result<(Matrix, BackboneCache)> {
    let q = x.matmul(&layer.w_q)?;
    let k = x.matmul(&layer.w_k)?;
    let v = x.matmul(&layer.w_v)?;
    let scale = 1.0 / (x.cols() as f64).sqrt();
    let weights = softmax_rows(&q.matmul_t(&k)?.scale(scale));
    let h = x.add(&weights.matmul(&v)?)?;
    Ok((h, BackboneCache { q, k, v, weights }))
}

fn backbone_backward(
    x: &Matrix,
    cache: &BackboneCache,
    layer: &BackboneLayer,
    d_h: &Matrix,
) -> Result<(Matrix, BackboneLayer)> {
    let scale = 1.0 / (x.cols() as f64).sqrt();
    let d_weights = d_h.matmul_t(&cache.v)?;
    let d_v = cache.weights.t_matmul(d_h)?;
    let d_scores = softmax_rows_backward(&cache.weights, &d_weights).scale(scale);
    let d_q = d_scores.matmul(&cache.k)?;
    let d_k = d_scores.t_matmul(&cache.q)?;
    let mut d_x = d_h.clone();
    d_x.add_scaled(&d_q.matmul_t(&layer.w_q)?, 1.0)?;
    d_x.add_scaled(&d_k.matmul_t(&layer.w_k)?, 1.0)?;
    d_x.add_scaled(&d_v.matmul_t(&layer.w_v)?, 1.0)?;
    let grads = BackboneLayer {
        w_q: x.t_matmul(&d_q)?,
        w_k: Matrix::zeros(layer.w_k.rows(), layer.w_k.cols()),
        w_v: x.t_matmul(&d_v)?,
    };
    Ok((d_x, grads))
}

/// Everything one layer computed, kept for diagnostics and the backward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub input: Matrix,
    /// Output of the toy self-attention; the agent block's visual tokens.
    pub visual: Matrix,
    /// Self-attention weights `N×N`, absent when the backbone is disabled.
    pub backbone_weights: Option<Matrix>,
    pub selection: SelectionOutcome,
    pub agents: Matrix,
    pub pooling: PoolingCache,
    pub output: Matrix,
    backbone: Option<BackboneCache>,
    attn: AgentAttnCache,
}

impl LayerTrace {
    pub fn attention_record(&self) -> AgentAttnRecord {
        self.attn.record()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub seg: f64,
    pub align: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub loss: LossBreakdown,
    pub text: ProjectedText,
    pub layers: Vec<LayerTrace>,
    pub output: Matrix,
}

fn selection_seed(instance_seed: u64, layer: usize) -> u64 {
    instance_seed ^ (layer as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Applies one encoder layer and its agent block.
pub fn layer_forward(
    cfg: &ModelConfig,
    params: &ModelParams,
    layer: usize,
    x: &Matrix,
    f_t: &Matrix,
    seed: u64,
) -> Result<LayerTrace> {
    let block = params.block_for(layer);
    let (visual, backbone) = if cfg.backbone {
        let (h, cache) = backbone_forward(x, &params.backbone[layer])?;
        (h, Some(cache))
    } else {
        (x.clone(), None)
    };
    let pick = |m: AttnMatrix| -> &Matrix {
        match (&backbone, m) {
            (None, _) => x,
            (Some(c), AttnMatrix::Q) => &c.q,
            (Some(c), AttnMatrix::K) => &c.k,
            (Some(c), AttnMatrix::V) => &c.v,
        }
    };
    let wiring = cfg.attention.wiring;
    let selection = select_agents(
        &cfg.selection,
        SelectionInputs {
            text: f_t,
            key: pick(wiring.affinity),
            value: pick(wiring.target),
            mask_token: &block.mask_token,
            transport: &cfg.transport,
            learnable: block.learnable_agents.as_ref(),
            seed: selection_seed(seed, layer),
        },
    )?;
    let (agents, pooling) = pool_variant(
        cfg.pooling.mode,
        cfg.pooling.shared_proj,
        &visual,
        f_t,
        &selection.selection.agents,
        &block.pooling,
    )?;
    let (output, attn) =
        agent_attention_forward(&visual, &agents, f_t, &block.attn, DiffAttnOptions::from(&cfg.attention))?;
    Ok(LayerTrace {
        input: x.clone(),
        backbone_weights: backbone.as_ref().map(|c| c.weights.clone()),
        visual,
        selection,
        agents,
        pooling,
        output,
        backbone,
        attn,
    })
}

fn check_instance(cfg: &ModelConfig, params: &ModelParams, inst: &Instance) -> Result<()> {
    const OP: &str = "model::forward";
    if inst.tokens.cols() != cfg.dim {
        return Err(Error::shape(OP, format!("token width {} vs model width {}", inst.tokens.cols(), cfg.dim)));
    }
    if inst.text.cols() != cfg.text_dim {
        return Err(Error::shape(OP, format!("text width {} vs {}", inst.text.cols(), cfg.text_dim)));
    }
    if params.backbone.len() != cfg.layers {
        return Err(Error::shape(
            OP,
            format!("{} backbone layers for {} configured", params.backbone.len(), cfg.layers),
        ));
    }
    let want_blocks = if cfg.shared_layers { 1 } else { cfg.layers };
    if params.blocks.len() != want_blocks {
        return Err(Error::shape(OP, format!("{} agent blocks, expected {want_blocks}", params.blocks.len())));
    }
    Ok(())
}

pub fn forward(cfg: &ModelConfig, params: &ModelParams, inst: &Instance) -> Result<ForwardPass> {
    check_instance(cfg, params, inst)?;
    let text = project_text(&inst.text, &params.text)?;
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut x = inst.tokens.clone();
    for l in 0..cfg.layers {
        let trace = layer_forward(cfg, params, l, &x, &text.f_t, inst.seed)?;
        x = trace.output.clone();
        layers.push(trace);
    }
    let (seg, _, _) = seg_loss_grad(&x, &text.f_t, &inst.labels, cfg.tau_seg)?;
    let (align, _) = align_loss_grad(&text.f_t, &text.f_t_prime, &params.loss)?;
    let loss = LossBreakdown { total: total_loss(seg, align), seg, align };
    Ok(ForwardPass { loss, text, layers, output: x })
}

/// Total loss only.
pub fn loss_value(cfg: &ModelConfig, params: &ModelParams, inst: &Instance) -> Result<f64> {
    forward(cfg, params, inst).map(|f| f.loss.total)
}

/// Total loss and its gradient w.r.t. every tensor of `params`.
pub fn loss_and_grad(cfg: &ModelConfig, params: &ModelParams, inst: &Instance) -> Result<(LossBreakdown, ModelParams)> {
    let fwd = forward(cfg, params, inst)?;
    let mut grads = params.zeroed();

    let (_, d_out, mut d_ft) = seg_loss_grad(&fwd.output, &fwd.text.f_t, &inst.labels, cfg.tau_seg)?;
    let (_, ag) = align_loss_grad(&fwd.text.f_t, &fwd.text.f_t_prime, &params.loss)?;
    d_ft.add_scaled(&ag.f_t, 1.0)?;
    grads.loss.log_tau1 = ag.log_tau1;
    grads.loss.log_tau2 = ag.log_tau2;

    let mut d_x = d_out;
    for (l, trace) in fwd.layers.iter().enumerate().rev() {
        let bi = params.block_index(l);
        let block = &params.blocks[bi];
        let attn_g = agent_attention_backward(&trace.attn, &block.attn, &d_x)?;
        let pool_g = pool_variant_backward(
            cfg.pooling.mode,
            cfg.pooling.shared_proj,
            &trace.pooling,
            &block.pooling,
            &attn_g.f_x,
        )?;
        let mut d_visual = attn_g.f_v;
        d_visual.add_scaled(&pool_g.f_v, 1.0)?;
        d_ft.add_scaled(&attn_g.f_t, 1.0)?;
        d_ft.add_scaled(&pool_g.f_t, 1.0)?;

        let mut layer_grads = block.zeroed();
        layer_grads.attn = attn_g.params;
        layer_grads.pooling = pool_g.params;
        grads.blocks[bi].accumulate(&layer_grads);

        d_x = match &trace.backbone {
            Some(cache) => {
                let (d_in, g) = backbone_backward(&trace.input, cache, &params.backbone[l], &d_visual)?;
                grads.backbone[l] = g;
                d_in
            }
            None => d_visual,
        };
    }

    let (d_out_map, d_phi) = project_text_backward(&inst.text, &fwd.text, &d_ft, &ag.f_t_prime)?;
    grads.text.out_map = d_out_map;
    grads.text.phi = d_phi;
    Ok((fwd.loss, grads))
}
