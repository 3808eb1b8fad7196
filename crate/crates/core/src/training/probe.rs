//! Linear probing on frozen synthetic embeddings.
//!
//! A linear classifier over all category channels starts from the text
//! directions (the zero-shot classifier) and is then trained on tokens of
//! seen categories only. The probability the probe assigns to the true
//! channel of held-out unseen tokens is tracked at every step.

use serde::{Deserialize, Serialize};

use super::model::{forward, loss_and_grad, ModelConfig, ModelParams, ParamSet};
use super::synthetic::{grid_for, sample_tokens, Instance};
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, softmax_rows, Matrix, Rng, NORM_EPS};
use crate::selection::SelectionConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub dim: usize,
    /// Cosine between an unseen direction and its seen parent.
    pub mixing: f64,
    pub signal: f64,
    pub noise: f64,
    /// Tokens per image.
    pub tokens: usize,
    pub train_images: usize,
    pub eval_images: usize,
    pub lr: f64,
    /// Logit scale of the probe is `1/temperature`.
    pub temperature: f64,
    /// Steps used to fit the agent block before probing.
    pub agent_steps: usize,
    pub agent_lr: f64,
    pub k: usize,
    pub q: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            dim: 16,
            mixing: 0.3,
            signal: 1.0,
            noise: 0.3,
            tokens: 24,
            train_images: 4,
            eval_images: 4,
            lr: 0.5,
            temperature: 0.1,
            agent_steps: 100,
            agent_lr: 0.05,
            k: 3,
            q: 4,
        }
    }
}

/// Per-step probe measurements; index `s` is taken before update `s`, the
/// last entry after the final update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrajectory {
    pub with_agent: bool,
    /// Mean probability of the true channel over unseen eval tokens.
    pub unseen_activation: Vec<f64>,
    /// Argmax accuracy on the seen training tokens.
    pub seen_accuracy: Vec<f64>,
}

impl ProbeTrajectory {
    pub fn initial_activation(&self) -> f64 {
        self.unseen_activation[0]
    }

    pub fn final_activation(&self) -> f64 {
        *self.unseen_activation.last().expect("at least one entry")
    }
}

struct ProbeData {
    directions: Matrix,
    train: Vec<(Matrix, Vec<usize>)>,
    eval: Vec<(Matrix, Vec<usize>)>,
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Seen categories get random directions. Each unseen category mixes a
/// seen parent (round robin) with an orthogonal random direction so that
/// its cosine with the parent equals `mixing`.
fn category_directions(cfg: &ProbeConfig, seen: &[usize], unseen: &[usize], rng: &mut Rng) -> Result<Matrix> {
    let total = seen.iter().chain(unseen).max().map_or(0, |m| m + 1);
    let mut dirs = Matrix::zeros(total, cfg.dim);
    for &s in seen {
        dirs.row_mut(s).copy_from_slice(&rng.unit_vector(cfg.dim));
    }
    for (i, &u) in unseen.iter().enumerate() {
        let parent = dirs.row(seen[i % seen.len()]).to_vec();
        let mut r = rng.unit_vector(cfg.dim);
        let along: f64 = r.iter().zip(&parent).map(|(a, b)| a * b).sum();
        r.iter_mut().zip(&parent).for_each(|(a, b)| *a -= along * b);
        unit(&mut r);
        let m = cfg.mixing;
        let row: Vec<f64> = parent.iter().zip(&r).map(|(p, o)| m * p + (1.0 - m * m).sqrt() * o).collect();
        dirs.row_mut(u).copy_from_slice(&row);
    }
    Ok(dirs)
}

fn spread(labels_from: &[usize], n: usize) -> Vec<usize> {
    (0..n).map(|j| labels_from[j * labels_from.len() / n]).collect()
}

fn probe_data(cfg: &ProbeConfig, seen: &[usize], unseen: &[usize], rng: &mut Rng) -> Result<ProbeData> {
    let directions = category_directions(cfg, seen, unseen, rng)?;
    let image = |labels: Vec<usize>, rng: &mut Rng| {
        (sample_tokens(&directions, &labels, cfg.signal, cfg.noise, rng), labels)
    };
    let train = (0..cfg.train_images).map(|_| image(spread(seen, cfg.tokens), rng)).collect();
    // Eval images hold every unseen category next to the seen ones.
    let mut mixed: Vec<usize> = unseen.to_vec();
    mixed.extend_from_slice(seen);
    let eval = (0..cfg.eval_images).map(|_| image(spread(&mixed, cfg.tokens), rng)).collect();
    Ok(ProbeData { directions, train, eval })
}

fn agent_config(cfg: &ProbeConfig, categories: usize) -> ModelConfig {
    ModelConfig {
        dim: cfg.dim,
        text_dim: cfg.dim,
        layers: 1,
        backbone: false,
        text_attention: false,
        selection: SelectionConfig { k: cfg.k.min(categories), q: cfg.q, ..SelectionConfig::default() },
        ..ModelConfig::default()
    }
}

/// Fits one agent block on seen categories and returns the refined token
/// sets, refined against the text of every category.
fn refine(
    cfg: &ProbeConfig,
    data: &ProbeData,
    seen: &[usize],
    seed: u64,
) -> Result<(Vec<(Matrix, Vec<usize>)>, Vec<(Matrix, Vec<usize>)>)> {
    let seen_text = crate::numerics::gather_rows(&data.directions, &crate::numerics::IndexList(seen.to_vec()))?;
    let mut remap = vec![usize::MAX; data.directions.rows()];
    for (i, &s) in seen.iter().enumerate() {
        remap[s] = i;
    }
    let (w, h) = grid_for(cfg.tokens);
    let instance = |tokens: &Matrix, labels: Vec<usize>, text: &Matrix, s: u64| Instance {
        tokens: tokens.clone(),
        labels,
        text: text.clone(),
        grid: (w, h),
        seed: s,
    };
    let fit_cfg = agent_config(cfg, seen.len());
    let fit_data: Vec<Instance> = data
        .train
        .iter()
        .enumerate()
        .map(|(i, (t, l))| instance(t, l.iter().map(|&c| remap[c]).collect(), &seen_text, seed ^ i as u64))
        .collect();
    let mut params = ModelParams::init(&fit_cfg, seed);
    params.text.out_map = Matrix::identity(cfg.dim);
    params.text.phi = Matrix::identity(cfg.dim);
    // Text stays the raw category directions; only the agent block learns.
    for step in 0..cfg.agent_steps {
        let (_, grads) = loss_and_grad(&fit_cfg, &params, &fit_data[step % fit_data.len()])?;
        for (block, g) in params.blocks.iter_mut().zip(&grads.blocks) {
            let next: Vec<f64> = block.flatten().iter().zip(g.flatten()).map(|(v, d)| v - cfg.agent_lr * d).collect();
            if let Some(i) = next.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric("probe_simulation", format!("agent fit diverged at step {step} (entry {i})")));
            }
            block.load(&next);
        }
    }

    let all_cfg = agent_config(cfg, data.directions.rows());
    let run = |sets: &[(Matrix, Vec<usize>)]| -> Result<Vec<(Matrix, Vec<usize>)>> {
        sets.iter()
            .enumerate()
            .map(|(i, (t, l))| {
                let inst = instance(t, l.clone(), &data.directions, seed ^ (1000 + i as u64));
                Ok((forward(&all_cfg, &params, &inst)?.output, l.clone()))
            })
            .collect()
    };
    Ok((run(&data.train)?, run(&data.eval)?))
}

fn stack(sets: &[(Matrix, Vec<usize>)], keep: impl Fn(usize) -> bool) -> Result<(Matrix, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (m, l) in sets {
        for (r, &c) in l.iter().enumerate() {
            if keep(c) {
                rows.push(m.row(r).to_vec());
                labels.push(c);
            }
        }
    }
    Ok((Matrix::from_rows(&rows)?, labels))
}

struct Probe {
    /// `C×d`
    weights: Matrix,
    scale: f64,
}

impl Probe {
    fn probs(&self, x: &Matrix) -> Result<Matrix> {
        Ok(softmax_rows(&x.matmul_t(&self.weights)?.scale(self.scale)))
    }

    fn true_channel_mean(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        let p = self.probs(x)?;
        Ok(labels.iter().enumerate().map(|(r, &c)| p[(r, c)]).sum::<f64>() / labels.len() as f64)
    }

    fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        let logits = x.matmul_t(&self.weights)?;
        let hits = labels
            .iter()
            .enumerate()
            .filter(|(r, &c)| {
                let row = logits.row(*r);
                row.iter().enumerate().all(|(j, &v)| j == c || v < row[c])
            })
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// One full-batch gradient step of mean cross-entropy.
    fn step(&mut self, x: &Matrix, labels: &[usize], lr: f64) -> Result<()> {
        let mut g = self.probs(x)?;
        for (r, &c) in labels.iter().enumerate() {
            let row = g.row_mut(r);
            row[c] -= 1.0;
        }
        let grad = g.t_matmul(x)?.scale(self.scale / labels.len() as f64);
        self.weights.add_scaled(&grad, -lr)
    }
}

/// Trains a zero-shot-initialized linear probe on seen categories and
/// records how strongly it still responds to unseen ones.
///
/// With `with_agent`, tokens are first refined by an agent block fitted
/// on the seen categories.
pub fn probe_simulation(
    cfg: &ProbeConfig,
    seen: &[usize],
    unseen: &[usize],
    steps: usize,
    with_agent: bool,
    seed: u64,
) -> Result<ProbeTrajectory> {
    const OP: &str = "probe_simulation";
    if seen.is_empty() || unseen.is_empty() {
        return Err(Error::argument(OP, "seen and unseen sets must be non-empty"));
    }
    if let Some(c) = seen.iter().find(|c| unseen.contains(c)) {
        return Err(Error::argument(OP, format!("category {c} is both seen and unseen")));
    }
    let mut all: Vec<usize> = seen.iter().chain(unseen).copied().collect();
    all.sort_unstable();
    if all.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::argument(OP, "repeated category"));
    }
    if cfg.dim < 2 || cfg.tokens < seen.len() + unseen.len() || cfg.train_images == 0 || cfg.eval_images == 0 {
        return Err(Error::argument(OP, "need dim ≥ 2, tokens ≥ categories and at least one image of each kind"));
    }
    if !(cfg.temperature > 0.0) || !(cfg.lr >= 0.0) || !(0.0..=1.0).contains(&cfg.mixing) {
        return Err(Error::argument(OP, "need temperature > 0, lr ≥ 0 and mixing in [0, 1]"));
    }

    let mut rng = Rng::new(seed);
    let data = probe_data(cfg, seen, unseen, &mut rng)?;
    let (train_sets, eval_sets) = if with_agent {
        refine(cfg, &data, seen, seed)?
    } else {
        (data.train.clone(), data.eval.clone())
    };
    // Features are compared by direction, as in zero-shot matching.
    let (x_train, y_train) = stack(&train_sets, |_| true)?;
    let x_train = l2_normalize_rows(&x_train, NORM_EPS);
    let (x_eval, y_eval) = stack(&eval_sets, |c| unseen.contains(&c))?;
    let x_eval = l2_normalize_rows(&x_eval, NORM_EPS);

    let mut probe = Probe { weights: data.directions.clone(), scale: 1.0 / cfg.temperature };
    let mut unseen_activation = Vec::with_capacity(steps + 1);
    let mut seen_accuracy = Vec::with_capacity(steps + 1);
    for s in 0..=steps {
        unseen_activation.push(probe.true_channel_mean(&x_eval, &y_eval)?);
        seen_accuracy.push(probe.accuracy(&x_train, &y_train)?);
        if s < steps {
            probe.step(&x_train, &y_train, cfg.lr)?;
        }
    }
    Ok(ProbeTrajectory { with_agent, unseen_activation, seen_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlapping_sets_rejected() {
        let cfg = ProbeConfig::default();
        assert!(matches!(
            probe_simulation(&cfg, &[0, 1], &[1, 2], 5, false, 0),
            Err(Error::Argument { .. })
        ));
        assert!(probe_simulation(&cfg, &[], &[1], 5, false, 0).is_err());
    }

    #[test]
    fn unseen_directions_have_requested_cosine() {
        let cfg = ProbeConfig::default();
        let mut rng = Rng::new(4);
        let d = category_directions(&cfg, &[0, 1], &[2, 3], &mut rng).unwrap();
        let cos = |a: usize, b: usize| d.row(a).iter().zip(d.row(b)).map(|(x, y)| x * y).sum::<f64>();
        assert!((cos(2, 0) - 0.3).abs() < 1e-12);
        assert!((cos(3, 1) - 0.3).abs() < 1e-12);
        assert!((cos(2, 2) - 1.0).abs() < 1e-12);
    }
}
