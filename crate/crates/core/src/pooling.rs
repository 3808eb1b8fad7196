//! Mask-guided dual-branch agent pooling.
//!
//! Each agent token gathers the source tokens it has positive inner product
//! with (a column-normalized indicator), the pooled rows go through a linear
//! projection, and the visual and textual branches are summed with the
//! scalar `γ = (exp(γ_v) − exp(γ_t)) + γ_init`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DEFAULT_GAMMA_INIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    VisualOnly,
    TextualOnly,
    /// Both branches fused with the re-parameterized γ.
    Dual,
    /// Both branches fused with one plain learnable scalar.
    SingleGamma,
}

impl PoolMode {
    pub const ALL: [PoolMode; 4] =
        [PoolMode::VisualOnly, PoolMode::TextualOnly, PoolMode::Dual, PoolMode::SingleGamma];

    pub fn name(self) -> &'static str {
        match self {
            PoolMode::VisualOnly => "visual-only",
            PoolMode::TextualOnly => "textual-only",
            PoolMode::Dual => "dual",
            PoolMode::SingleGamma => "single-gamma",
        }
    }
}

impl std::str::FromStr for PoolMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        PoolMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            format!("unknown pooling mode `{s}` (expected visual-only|textual-only|dual|single-gamma)")
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolingConfig {
    pub mode: PoolMode,
    pub gamma_init: f64,
    /// Use `proj_v` for the textual branch as well.
    pub shared_proj: bool,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        PoolingConfig { mode: PoolMode::Dual, gamma_init: DEFAULT_GAMMA_INIT, shared_proj: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolingParams {
    pub proj_v: Matrix,
    pub proj_t: Matrix,
    pub gamma_v: f64,
    pub gamma_t: f64,
    /// Fixed offset, not trained.
    pub gamma_init: f64,
    /// Scalar used by [`PoolMode::SingleGamma`].
    pub gamma_single: f64,
}

impl PoolingParams {
    /// Identity projections, `γ_v = γ_t = 0`, single scalar at `gamma_init`.
    pub fn new(dim: usize, gamma_init: f64) -> Self {
        PoolingParams {
            proj_v: Matrix::identity(dim),
            proj_t: Matrix::identity(dim),
            gamma_v: 0.0,
            gamma_t: 0.0,
            gamma_init,
            gamma_single: gamma_init,
        }
    }

    pub fn gamma(&self) -> f64 {
        (self.gamma_v.exp() - self.gamma_t.exp()) + self.gamma_init
    }
}

/// Column-normalized indicator `(f_src · f_xᵀ > 0)`, `M×(k·q)`.
///
/// A column without any positive entry falls back to uniform `1/M`, so
/// every column is a probability vector.
pub fn mask_tokens(f_src: &Matrix, f_x: &Matrix) -> Result<Matrix> {
    if f_src.cols() != f_x.cols() {
        return Err(Error::shape(
            "mask_tokens",
            format!("source width {} vs agent width {}", f_src.cols(), f_x.cols()),
        ));
    }
    let scores = f_src.matmul_t(f_x)?;
    let m = f_src.rows();
    let mut mask = scores.map(|s| if s > 0.0 { 1.0 } else { 0.0 });
    let counts = mask.col_sums();
    for (j, &count) in counts.iter().enumerate() {
        for i in 0..m {
            mask[(i, j)] = if count > 0.0 { mask[(i, j)] / count } else { 1.0 / m as f64 };
        }
    }
    Ok(mask)
}

/// `(maskᵀ · f_src) · proj`.
pub fn pool(f_src: &Matrix, mask: &Matrix, proj: &Matrix) -> Result<Matrix> {
    mask.t_matmul(f_src)?.matmul(proj)
}

pub fn fuse(f_vp: &Matrix, f_tp: &Matrix, params: &PoolingParams) -> Result<Matrix> {
    fuse_with(f_vp, f_tp, params.gamma())
}

fn fuse_with(f_vp: &Matrix, f_tp: &Matrix, gamma: f64) -> Result<Matrix> {
    let mut out = f_vp.clone();
    out.add_scaled(f_tp, gamma)
        .map_err(|_| Error::shape("fuse", format!("{:?} vs {:?}", f_vp.shape(), f_tp.shape())))?;
    Ok(out)
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PoolingCache {
    pub mask_v: Matrix,
    pub mask_t: Matrix,
    pooled_v: Matrix,
    pooled_t: Matrix,
    pub f_vp: Matrix,
    pub f_tp: Matrix,
}

/// Full pooling step for the given mode: masks from the selected agents,
/// both branch pools, and the fusion.
pub fn pool_variant(
    mode: PoolMode,
    shared_proj: bool,
    f_v: &Matrix,
    f_t: &Matrix,
    agents: &Matrix,
    params: &PoolingParams,
) -> Result<(Matrix, PoolingCache)> {
    let mask_v = mask_tokens(f_v, agents)?;
    let mask_t = mask_tokens(f_t, agents)?;
    let proj_t = if shared_proj { &params.proj_v } else { &params.proj_t };
    let pooled_v = mask_v.t_matmul(f_v)?;
    let pooled_t = mask_t.t_matmul(f_t)?;
    let f_vp = pooled_v.matmul(&params.proj_v)?;
    let f_tp = pooled_t.matmul(proj_t)?;
    let out = match mode {
        PoolMode::VisualOnly => f_vp.clone(),
        PoolMode::TextualOnly => f_tp.clone(),
        PoolMode::Dual => fuse(&f_vp, &f_tp, params)?,
        PoolMode::SingleGamma => fuse_with(&f_vp, &f_tp, params.gamma_single)?,
    };
    out.ensure_finite("pool_variant")?;
    Ok((out, PoolingCache { mask_v, mask_t, pooled_v, pooled_t, f_vp, f_tp }))
}

/// Gradients of [`pool_variant`]. The masks are constants.
#[derive(Debug, Clone)]
pub struct PoolingGrads {
    pub f_v: Matrix,
    pub f_t: Matrix,
    pub params: PoolingParams,
}

pub fn pool_variant_backward(
    mode: PoolMode,
    shared_proj: bool,
    cache: &PoolingCache,
    params: &PoolingParams,
    grad_out: &Matrix,
) -> Result<PoolingGrads> {
    let dim = params.proj_v.rows();
    let mut g = PoolingParams {
        proj_v: Matrix::zeros(dim, dim),
        proj_t: Matrix::zeros(dim, dim),
        gamma_v: 0.0,
        gamma_t: 0.0,
        gamma_init: 0.0,
        gamma_single: 0.0,
    };
    let (d_vp, d_tp) = match mode {
        PoolMode::VisualOnly => (grad_out.clone(), Matrix::zeros(grad_out.rows(), grad_out.cols())),
        PoolMode::TextualOnly => (Matrix::zeros(grad_out.rows(), grad_out.cols()), grad_out.clone()),
        PoolMode::Dual => {
            let d_gamma = grad_out.dot(&cache.f_tp);
            g.gamma_v = d_gamma * params.gamma_v.exp();
            g.gamma_t = -d_gamma * params.gamma_t.exp();
            (grad_out.clone(), grad_out.scale(params.gamma()))
        }
        PoolMode::SingleGamma => {
            g.gamma_single = grad_out.dot(&cache.f_tp);
            (grad_out.clone(), grad_out.scale(params.gamma_single))
        }
    };
    let proj_t = if shared_proj { &params.proj_v } else { &params.proj_t };

    g.proj_v = cache.pooled_v.t_matmul(&d_vp)?;
    let d_pooled_v = d_vp.matmul_t(&params.proj_v)?;
    let d_proj_t = cache.pooled_t.t_matmul(&d_tp)?;
    if shared_proj {
        g.proj_v.add_scaled(&d_proj_t, 1.0)?;
    } else {
        g.proj_t = d_proj_t;
    }
    let d_pooled_t = d_tp.matmul_t(proj_t)?;

    Ok(PoolingGrads {
        f_v: cache.mask_v.matmul(&d_pooled_v)?,
        f_t: cache.mask_t.matmul(&d_pooled_t)?,
        params: g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn single_positive_mask() {
        let mask = mask_tokens(&m(&[vec![1.0, 0.0]]), &m(&[vec![1.0, 0.0]])).unwrap();
        assert_eq!(mask.as_slice(), &[1.0]);
    }

    #[test]
    fn no_positive_column_falls_back_to_uniform() {
        let src = m(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let agents = m(&[vec![-1.0, -1.0], vec![1.0, 0.0]]);
        let mask = mask_tokens(&src, &agents).unwrap();
        for i in 0..3 {
            assert_eq!(mask[(i, 0)], 1.0 / 3.0);
        }
        assert_eq!(mask[(0, 1)], 0.5);
        assert_eq!(mask[(1, 1)], 0.0);
        assert_eq!(mask[(2, 1)], 0.5);
    }

    #[test]
    fn exact_zero_scores_are_excluded() {
        let src = m(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let mask = mask_tokens(&src, &m(&[vec![1.0, 0.0]])).unwrap();
        assert_eq!(mask.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn one_hot_mask_selects_a_row() {
        let src = m(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let mask = m(&[vec![0.0], vec![1.0], vec![0.0]]);
        let pooled = pool(&src, &mask, &Matrix::identity(2)).unwrap();
        assert_eq!(pooled.as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn uniform_mask_averages() {
        let src = m(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 9.0]]);
        let mask = Matrix::filled(3, 1, 1.0 / 3.0);
        let pooled = pool(&src, &mask, &Matrix::identity(2)).unwrap();
        assert!((pooled[(0, 0)] - 3.0).abs() < 1e-15);
        assert!((pooled[(0, 1)] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn default_gamma_is_init() {
        let p = PoolingParams::new(2, DEFAULT_GAMMA_INIT);
        assert_eq!(p.gamma(), 0.1);
        let vp = m(&[vec![1.0, 2.0]]);
        let tp = m(&[vec![10.0, -10.0]]);
        let out = fuse(&vp, &tp, &p).unwrap();
        assert_eq!(out.as_slice(), &[2.0, 1.0]);
    }

    #[test]
    fn equal_gamma_logits_cancel() {
        for c in [-3.0, 0.7, 2.5] {
            let p = PoolingParams { gamma_v: c, gamma_t: c, ..PoolingParams::new(1, 0.1) };
            assert_eq!(p.gamma(), 0.1);
        }
    }

    #[test]
    fn zero_textual_branch_leaves_visual() {
        let p = PoolingParams { gamma_v: 1.3, gamma_t: -0.2, ..PoolingParams::new(2, 0.1) };
        let vp = m(&[vec![1.0, 2.0]]);
        assert_eq!(fuse(&vp, &Matrix::zeros(1, 2), &p).unwrap(), vp);
    }

    #[test]
    fn modes_parse() {
        for mode in PoolMode::ALL {
            assert_eq!(mode.name().parse::<PoolMode>().unwrap(), mode);
        }
        assert!("max".parse::<PoolMode>().is_err());
    }
}
