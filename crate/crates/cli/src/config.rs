//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Every key must be
//! known and may appear at most once per source; inline overrides beat
//! file values.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use xagent_core::attention::Wiring;
use xagent_core::pooling::PoolMode;
use xagent_core::selection::SelectionStrategy;
use xagent_core::training::{ModelConfig, ProbeConfig, SyntheticConfig, DEFAULT_LR_DECODER};
use xagent_core::transport::CostVariant;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{key}`")]
    UnknownKey { key: String },
    #[error("key `{key}` given more than once")]
    DuplicateKey { key: String },
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

impl ConfigError {
    /// The offending key, when the error is about one.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey { key } | ConfigError::DuplicateKey { key } | ConfigError::Invalid { key, .. } => {
                Some(key)
            }
            _ => None,
        }
    }
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    /// Visual tokens per instance.
    pub n: usize,
    pub d: usize,
    pub d_text: usize,
    /// Categories per instance.
    pub nc: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingSettings {
    pub steps: usize,
    pub seed: u64,
    pub lr_decoder: f64,
    pub lr_backbone: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub seen: usize,
    pub unseen: usize,
    pub steps: usize,
    pub seeds: usize,
    pub sim: ProbeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSettings {
    pub dir: String,
    pub heatmaps: bool,
    pub trajectories: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dims: Dims,
    pub model: ModelConfig,
    pub training: TrainingSettings,
    pub data: SyntheticConfig,
    pub mixing: f64,
    pub probe: ProbeSettings,
    pub output: OutputSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let data = SyntheticConfig::default();
        RunConfig {
            dims: Dims { n: data.tokens, d: model.dim, d_text: model.text_dim, nc: data.categories, layers: model.layers },
            training: TrainingSettings {
                steps: 100,
                seed: 0,
                lr_decoder: DEFAULT_LR_DECODER,
                lr_backbone: DEFAULT_LR_DECODER / 100.0,
            },
            mixing: ProbeConfig::default().mixing,
            probe: ProbeSettings { seen: 8, unseen: 4, steps: 200, seeds: 5, sim: ProbeConfig::default() },
            output: OutputSettings { dir: "out".into(), heatmaps: true, trajectories: true },
            model,
            data,
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "dims.n",
    "dims.d",
    "dims.d_text",
    "dims.nc",
    "dims.layers",
    "selection.strategy",
    "selection.k",
    "selection.q",
    "selection.largest",
    "transport.epsilon",
    "transport.max_iter",
    "transport.tol",
    "transport.cost",
    "pooling.mode",
    "pooling.gamma_init",
    "pooling.shared_proj",
    "attention.lambda_init",
    "attention.heads",
    "attention.pre_norm",
    "attention.wiring",
    "attention.shared_layers",
    "model.text_attention",
    "model.backbone",
    "model.tau_seg",
    "model.tau_init",
    "training.steps",
    "training.seed",
    "training.lr_decoder",
    "training.lr_backbone",
    "data.signal",
    "data.noise",
    "data.text_noise",
    "data.mixing",
    "probe.seen",
    "probe.unseen",
    "probe.steps",
    "probe.seeds",
    "probe.lr",
    "probe.temperature",
    "probe.tokens",
    "probe.train_images",
    "probe.eval_images",
    "probe.agent_steps",
    "probe.agent_lr",
    "probe.k",
    "probe.q",
    "output.dir",
    "output.heatmaps",
    "output.trajectories",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| invalid(key, format!("`{value}`: {e}")))
}

fn positive(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = parse(key, value)?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(key, format!("`{value}` must be a positive finite number")))
    }
}

fn non_negative(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = parse(key, value)?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(key, format!("`{value}` must be a non-negative finite number")))
    }
}

fn finite(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = parse(key, value)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(key, format!("`{value}` must be finite")))
    }
}

fn count(key: &str, value: &str) -> Result<usize, ConfigError> {
    let v: usize = parse(key, value)?;
    if v == 0 {
        return Err(invalid(key, "must be at least 1"));
    }
    Ok(v)
}

impl RunConfig {
    fn set(&mut self, key: &str, value: &str, lr_backbone_set: &mut bool) -> Result<(), ConfigError> {
        let m = &mut self.model;
        let p = &mut self.probe;
        match key {
            "dims.n" => self.dims.n = count(key, value)?,
            "dims.d" => self.dims.d = count(key, value)?,
            "dims.d_text" => self.dims.d_text = count(key, value)?,
            "dims.nc" => self.dims.nc = count(key, value)?,
            "dims.layers" => self.dims.layers = count(key, value)?,
            "selection.strategy" => m.selection.strategy = parse::<SelectionStrategy>(key, value)?,
            "selection.k" => m.selection.k = count(key, value)?,
            "selection.q" => m.selection.q = count(key, value)?,
            "selection.largest" => m.selection.largest = parse(key, value)?,
            "transport.epsilon" => m.transport.epsilon = positive(key, value)?,
            "transport.max_iter" => m.transport.max_iter = count(key, value)?,
            "transport.tol" => m.transport.tol = positive(key, value)?,
            "transport.cost" => m.transport.cost = parse::<CostVariant>(key, value)?,
            "pooling.mode" => m.pooling.mode = parse::<PoolMode>(key, value)?,
            "pooling.gamma_init" => m.pooling.gamma_init = finite(key, value)?,
            "pooling.shared_proj" => m.pooling.shared_proj = parse(key, value)?,
            "attention.lambda_init" => m.attention.lambda_init = finite(key, value)?,
            "attention.heads" => m.attention.heads = count(key, value)?,
            "attention.pre_norm" => m.attention.pre_norm = parse(key, value)?,
            "attention.wiring" => m.attention.wiring = parse::<Wiring>(key, value)?,
            "attention.shared_layers" => m.shared_layers = parse(key, value)?,
            "model.text_attention" => m.text_attention = parse(key, value)?,
            "model.backbone" => m.backbone = parse(key, value)?,
            "model.tau_seg" => m.tau_seg = positive(key, value)?,
            "model.tau_init" => m.tau_init = positive(key, value)?,
            "training.steps" => self.training.steps = count(key, value)?,
            "training.seed" => self.training.seed = parse(key, value)?,
            "training.lr_decoder" => self.training.lr_decoder = non_negative(key, value)?,
            "training.lr_backbone" => {
                self.training.lr_backbone = non_negative(key, value)?;
                *lr_backbone_set = true;
            }
            "data.signal" => self.data.signal = finite(key, value)?,
            "data.noise" => self.data.noise = non_negative(key, value)?,
            "data.text_noise" => self.data.text_noise = non_negative(key, value)?,
            "data.mixing" => {
                let v = non_negative(key, value)?;
                if v > 1.0 {
                    return Err(invalid(key, "must lie in [0, 1]"));
                }
                self.mixing = v;
            }
            "probe.seen" => p.seen = count(key, value)?,
            "probe.unseen" => p.unseen = count(key, value)?,
            "probe.steps" => p.steps = count(key, value)?,
            "probe.seeds" => p.seeds = count(key, value)?,
            "probe.lr" => p.sim.lr = non_negative(key, value)?,
            "probe.temperature" => p.sim.temperature = positive(key, value)?,
            "probe.tokens" => p.sim.tokens = count(key, value)?,
            "probe.train_images" => p.sim.train_images = count(key, value)?,
            "probe.eval_images" => p.sim.eval_images = count(key, value)?,
            "probe.agent_steps" => p.sim.agent_steps = count(key, value)?,
            "probe.agent_lr" => p.sim.agent_lr = non_negative(key, value)?,
            "probe.k" => p.sim.k = count(key, value)?,
            "probe.q" => p.sim.q = count(key, value)?,
            "output.dir" => {
                if value.is_empty() {
                    return Err(invalid(key, "must not be empty"));
                }
                self.output.dir = value.to_string();
            }
            "output.heatmaps" => self.output.heatmaps = parse(key, value)?,
            "output.trajectories" => self.output.trajectories = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey { key: key.to_string() }),
        }
        Ok(())
    }

    /// Copies the dimension block and generator knobs into the module configs.
    fn sync(&mut self) {
        let d = self.dims;
        self.model.dim = d.d;
        self.model.text_dim = d.d_text;
        self.model.layers = d.layers;
        self.data.tokens = d.n;
        self.data.categories = d.nc;
        self.data.dim = d.d;
        self.data.text_dim = d.d_text;
        let sim = &mut self.probe.sim;
        sim.dim = d.d;
        sim.signal = self.data.signal;
        sim.noise = self.data.noise;
        sim.mixing = self.mixing;
    }

    /// Cross-key checks applied after every key has been set.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        let d = self.dims;
        if m.selection.k > d.nc {
            return Err(invalid("selection.k", format!("k = {} exceeds dims.nc = {}", m.selection.k, d.nc)));
        }
        if m.selection.q > d.n {
            return Err(invalid("selection.q", format!("q = {} exceeds dims.n = {}", m.selection.q, d.n)));
        }
        if m.selection.strategy == SelectionStrategy::Random && m.selection.agent_count() > d.n {
            return Err(invalid(
                "selection.k",
                format!("random selection needs k·q = {} ≤ dims.n = {}", m.selection.agent_count(), d.n),
            ));
        }
        if d.nc < 2 {
            return Err(invalid("dims.nc", "the alignment loss needs at least 2 categories"));
        }
        if d.n < d.nc {
            return Err(invalid("dims.n", format!("need at least one token per category ({} < {})", d.n, d.nc)));
        }
        if d.d % m.attention.heads != 0 {
            return Err(invalid("attention.heads", format!("{} heads do not divide dims.d = {}", m.attention.heads, d.d)));
        }
        let p = &self.probe;
        if p.sim.tokens < p.seen + p.unseen {
            return Err(invalid("probe.tokens", "need at least one token per probe category"));
        }
        if d.d < 2 {
            return Err(invalid("dims.d", "must be at least 2"));
        }
        Ok(())
    }

    /// Current value of every key, rendered so that parsing it back
    /// reproduces this config.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let m = &self.model;
        let p = &self.probe;
        let values: Vec<String> = vec![
            self.dims.n.to_string(),
            self.dims.d.to_string(),
            self.dims.d_text.to_string(),
            self.dims.nc.to_string(),
            self.dims.layers.to_string(),
            m.selection.strategy.name().to_string(),
            m.selection.k.to_string(),
            m.selection.q.to_string(),
            m.selection.largest.to_string(),
            m.transport.epsilon.to_string(),
            m.transport.max_iter.to_string(),
            m.transport.tol.to_string(),
            m.transport.cost.name().to_string(),
            m.pooling.mode.name().to_string(),
            m.pooling.gamma_init.to_string(),
            m.pooling.shared_proj.to_string(),
            m.attention.lambda_init.to_string(),
            m.attention.heads.to_string(),
            m.attention.pre_norm.to_string(),
            m.attention.wiring.code(),
            m.shared_layers.to_string(),
            m.text_attention.to_string(),
            m.backbone.to_string(),
            m.tau_seg.to_string(),
            m.tau_init.to_string(),
            self.training.steps.to_string(),
            self.training.seed.to_string(),
            self.training.lr_decoder.to_string(),
            self.training.lr_backbone.to_string(),
            self.data.signal.to_string(),
            self.data.noise.to_string(),
            self.data.text_noise.to_string(),
            self.mixing.to_string(),
            p.seen.to_string(),
            p.unseen.to_string(),
            p.steps.to_string(),
            p.seeds.to_string(),
            p.sim.lr.to_string(),
            p.sim.temperature.to_string(),
            p.sim.tokens.to_string(),
            p.sim.train_images.to_string(),
            p.sim.eval_images.to_string(),
            p.sim.agent_steps.to_string(),
            p.sim.agent_lr.to_string(),
            p.sim.k.to_string(),
            p.sim.q.to_string(),
            self.output.dir.clone(),
            self.output.heatmaps.to_string(),
            self.output.trajectories.to_string(),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    /// Renders the config in the file format.
    pub fn render(&self) -> String {
        let entries = self.entries();
        KEYS.iter().map(|k| format!("{k} = {}\n", entries[*k])).collect()
    }
}

/// Splits config text into `(key, value)` pairs, rejecting repeats.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .filter(|(k, _)| !k.is_empty())
            .ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
        if pairs.iter().any(|(k, _)| k == key) {
            return Err(ConfigError::DuplicateKey { key: key.to_string() });
        }
        pairs.push((key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

/// Parses one `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(ConfigError::Syntax { line: 0, text: s.to_string() }),
    }
}

/// Builds a validated config from file text and inline overrides.
pub fn parse_config_str(text: &str, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let file = parse_pairs(text)?;
    let mut seen_override: Vec<&str> = Vec::new();
    for (k, _) in overrides {
        if seen_override.contains(&k.as_str()) {
            return Err(ConfigError::DuplicateKey { key: k.clone() });
        }
        seen_override.push(k);
    }
    let mut cfg = RunConfig::default();
    let mut lr_backbone_set = false;
    for (k, v) in file.iter().chain(overrides) {
        cfg.set(k, v, &mut lr_backbone_set)?;
    }
    if !lr_backbone_set {
        cfg.training.lr_backbone = cfg.training.lr_decoder / 100.0;
    }
    cfg.sync();
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (if any) and applies `overrides` on top.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|source| ConfigError::Io { path: p.display().to_string(), source })?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config_str("", &[]).unwrap();
        assert_eq!(cfg.model.selection.k, 10);
        assert_eq!(cfg.model.selection.q, 4);
        assert_eq!(cfg.model.pooling.gamma_init, 0.1);
        assert_eq!(cfg.model.transport.epsilon, 0.05);
        assert_eq!(cfg.training.lr_backbone, cfg.training.lr_decoder / 100.0);
    }

    #[test]
    fn zero_k_names_the_key() {
        let err = parse_config_str("selection.k = 0\n", &[]).unwrap_err();
        assert_eq!(err.key(), Some("selection.k"));
    }

    #[test]
    fn override_beats_file() {
        let cfg = parse_config_str("selection.q = 3\n", &ov(&[("selection.q", "2")])).unwrap();
        assert_eq!(cfg.model.selection.q, 2);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert!(matches!(parse_config_str("selection.kk = 3", &[]), Err(ConfigError::UnknownKey { .. })));
        assert!(matches!(
            parse_config_str("selection.k = 3\nselection.k = 4", &[]),
            Err(ConfigError::DuplicateKey { .. })
        ));
        assert!(matches!(parse_config_str("just words", &[]), Err(ConfigError::Syntax { line: 1, .. })));
    }

    #[test]
    fn invalid_values_name_their_key() {
        for (text, key) in [
            ("transport.epsilon = -1", "transport.epsilon"),
            ("transport.cost = l1", "transport.cost"),
            ("attention.wiring = KX", "attention.wiring"),
            ("pooling.mode = both", "pooling.mode"),
            ("selection.largest = maybe", "selection.largest"),
            ("selection.k = 13", "selection.k"),
            ("attention.heads = 3", "attention.heads"),
            ("data.mixing = 1.5", "data.mixing"),
        ] {
            assert_eq!(parse_config_str(text, &[]).unwrap_err().key(), Some(key), "{text}");
        }
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = parse_config_str("# comment\n\n  selection.q = 2  \n", &[]).unwrap();
        assert_eq!(cfg.model.selection.q, 2);
    }

    #[test]
    fn render_round_trips() {
        let cfg = parse_config_str(
            "dims.n = 16\ndims.d = 8\ndims.nc = 6\nselection.k = 3\ntransport.tol = 1e-7\nattention.wiring = QV\n",
            &[],
        )
        .unwrap();
        assert_eq!(parse_config_str(&cfg.render(), &[]).unwrap(), cfg);
        assert_eq!(cfg.entries().len(), KEYS.len());
    }

    #[test]
    fn explicit_backbone_rate_is_kept() {
        let cfg = parse_config_str("training.lr_decoder = 0.2\ntraining.lr_backbone = 0.1", &[]).unwrap();
        assert_eq!(cfg.training.lr_backbone, 0.1);
        let derived = parse_config_str("training.lr_decoder = 0.2", &[]).unwrap();
        assert_eq!(derived.training.lr_backbone, 0.002);
    }
}
