use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Matrix, Rng};

/// Desk-scale text projector.
///
/// `f_t` comes from an optional parameter-free residual self-attention
/// over the raw text rows followed by `out_map`; `f′_t` is the separate
/// linear re-embedding `f_t_init · phi` used by the alignment loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextProjector {
    pub attention: bool,
    /// `d′×d`
    pub out_map: Matrix,
    /// `d′×d`
    pub phi: Matrix,
}

impl TextProjector {
    pub fn init(text_dim: usize, dim: usize, attention: bool, rng: &mut Rng) -> Self {
        let s = 1.0 / (text_dim as f64).sqrt();
        TextProjector {
            attention,
            out_map: rng.normal_matrix(text_dim, dim, s),
            phi: rng.normal_matrix(text_dim, dim, s),
        }
    }
}

/// Output of [`project_text`] with the context needed by the backward pass.
#[derive(Debug, Clone)]
pub struct ProjectedText {
    pub f_t: Matrix,
    pub f_t_prime: Matrix,
    context: Matrix,
}

fn text_context(f_t_init: &Matrix) -> Result<Matrix> {
    let scale = 1.0 / (f_t_init.cols() as f64).sqrt();
    let weights = softmax_rows(&f_t_init.matmul_t(f_t_init)?.scale(scale));
    f_t_init.add(&weights.matmul(f_t_init)?)
}

pub fn project_text(f_t_init: &Matrix, p: &TextProjector) -> Result<ProjectedText> {
    if f_t_init.cols() != p.out_map.rows() || f_t_init.cols() != p.phi.rows() {
        return Err(Error::shape(
            "project_text",
            format!(
                "text width {} vs projector input widths {} / {}",
                f_t_init.cols(),
                p.out_map.rows(),
                p.phi.rows()
            ),
        ));
    }
    let context = if p.attention { text_context(f_t_init)? } else { f_t_init.clone() };
    Ok(ProjectedText {
        f_t: context.matmul(&p.out_map)?,
        f_t_prime: f_t_init.matmul(&p.phi)?,
        context,
    })
}

/// Gradients w.r.t. `out_map` and `phi`. The raw text rows are data.
pub fn project_text_backward(
    f_t_init: &Matrix,
    projected: &ProjectedText,
    d_f_t: &Matrix,
    d_f_t_prime: &Matrix,
) -> Result<(Matrix, Matrix)> {
    Ok((projected.context.t_matmul(d_f_t)?, f_t_init.t_matmul(d_f_t_prime)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_phi_reproduces_input() {
        let init = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.25 - 1.0);
        let mut rng = Rng::new(0);
        let mut p = TextProjector::init(4, 4, true, &mut rng);
        p.phi = Matrix::identity(4);
        let out = project_text(&init, &p).unwrap();
        assert_eq!(out.f_t_prime, init);
    }

    #[test]
    fn no_attention_is_plain_map() {
        let init = Matrix::from_fn(3, 4, |r, c| ((r + 1) * (c + 2)) as f64 * 0.1);
        let mut rng = Rng::new(1);
        let p = TextProjector::init(4, 2, false, &mut rng);
        let out = project_text(&init, &p).unwrap();
        assert_eq!(out.f_t, init.matmul(&p.out_map).unwrap());
    }

    #[test]
    fn width_mismatch() {
        let mut rng = Rng::new(1);
        let p = TextProjector::init(4, 2, false, &mut rng);
        assert!(project_text(&Matrix::zeros(2, 3), &p).is_err());
    }
}
