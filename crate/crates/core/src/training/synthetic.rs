//! Synthetic embeddings: categories are random unit directions, tokens are
//! noisy copies of their label's direction, and text rows are a random
//! linear image of the directions in the text width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub tokens: usize,
    pub categories: usize,
    pub dim: usize,
    pub text_dim: usize,
    /// Scale of the label direction in each token.
    pub signal: f64,
    /// Std of the isotropic token noise.
    pub noise: f64,
    /// Std of the noise added to text rows.
    pub text_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { tokens: 64, categories: 12, dim: 16, text_dim: 24, signal: 1.0, noise: 0.3, text_noise: 0.05 }
    }
}

/// One image-like sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    /// `N×d` visual tokens in raster order over `grid`.
    pub tokens: Matrix,
    pub labels: Vec<usize>,
    /// `Nc×d′` raw text embeddings.
    pub text: Matrix,
    /// `(width, height)`
    pub grid: (usize, usize),
    pub seed: u64,
}

/// Most square `(width, height)` factorization of `n` with `width ≥ height`.
pub fn grid_for(n: usize) -> (usize, usize) {
    let mut h = (n as f64).sqrt().floor() as usize;
    while h > 1 && n % h != 0 {
        h -= 1;
    }
    let h = h.max(1);
    (n / h, h)
}

/// Category directions and their text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryBank {
    /// `Nc×d` unit rows.
    pub directions: Matrix,
    /// `Nc×d′`
    pub text: Matrix,
}

impl CategoryBank {
    pub fn random(categories: usize, dim: usize, text_dim: usize, text_noise: f64, rng: &mut Rng) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..categories).map(|_| rng.unit_vector(dim)).collect();
        let directions = Matrix::from_rows(&rows)?;
        let lift = rng.normal_matrix(dim, text_dim, 1.0 / (dim as f64).sqrt());
        let mut text = directions.matmul(&lift)?;
        text.add_scaled(&rng.normal_matrix(categories, text_dim, text_noise), 1.0)?;
        Ok(CategoryBank { directions, text })
    }
}

/// Noisy tokens for the given labels.
pub fn sample_tokens(directions: &Matrix, labels: &[usize], signal: f64, noise: f64, rng: &mut Rng) -> Matrix {
    let mut tokens = Matrix::zeros(labels.len(), directions.cols());
    for (r, &label) in labels.iter().enumerate() {
        for (c, v) in tokens.row_mut(r).iter_mut().enumerate() {
            *v = signal * directions[(label, c)] + noise * rng.normal();
        }
    }
    tokens
}

/// Labels cover the raster in contiguous bands, so each category appears.
pub fn banded_labels(tokens: usize, categories: usize) -> Vec<usize> {
    (0..tokens).map(|j| j * categories / tokens).collect()
}

pub fn generate(cfg: &SyntheticConfig, seed: u64) -> Result<Instance> {
    if cfg.tokens < cfg.categories || cfg.categories == 0 || cfg.dim == 0 || cfg.text_dim == 0 {
        return Err(Error::argument(
            "synthetic::generate",
            format!("need tokens ≥ categories ≥ 1 (tokens {}, categories {})", cfg.tokens, cfg.categories),
        ));
    }
    let mut rng = Rng::new(seed);
    let bank = CategoryBank::random(cfg.categories, cfg.dim, cfg.text_dim, cfg.text_noise, &mut rng)?;
    let labels = banded_labels(cfg.tokens, cfg.categories);
    let tokens = sample_tokens(&bank.directions, &labels, cfg.signal, cfg.noise, &mut rng);
    Ok(Instance { tokens, labels, text: bank.text, grid: grid_for(cfg.tokens), seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(grid_for(16), (4, 4));
        assert_eq!(grid_for(64), (8, 8));
        assert_eq!(grid_for(8), (4, 2));
        assert_eq!(grid_for(7), (7, 1));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig::default();
        assert_eq!(generate(&cfg, 3).unwrap(), generate(&cfg, 3).unwrap());
        assert_ne!(generate(&cfg, 3).unwrap().tokens, generate(&cfg, 4).unwrap().tokens);
    }

    #[test]
    fn every_category_present() {
        let labels = banded_labels(16, 6);
        for c in 0..6 {
            assert!(labels.contains(&c));
        }
    }
}
