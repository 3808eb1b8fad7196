//! Subcommand orchestration.
//!
//! Each stage is timed and any error is recorded with the stage name; the
//! report file is rewritten after every stage so an aborted run still
//! leaves everything computed so far on disk.

use std::path::{Path, PathBuf};
use std::time::Instant;

use xagent_core::attention::cross_attn_weights;
use xagent_core::pooling::PoolMode;
use xagent_core::selection::SelectionStrategy;
use xagent_core::training::{
    forward, probe_simulation, synthetic, train, Instance, LearningRates, LossRecord, ModelParams, TrainState,
};
use xagent_core::transport::CostVariant;
use xagent_core::attention::Wiring;

use crate::config::RunConfig;
use crate::heatmap::{emit_heatmap, Table};
use crate::invariants::{invariant_suite, layer_mad};
use crate::report::{AblationRow, MadPair, MadProfile, ProbeRun, ProbeSummary, RunReport, StageError};

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Forward,
    Train,
    Ablate,
    Probe,
    Mad,
}

impl Subcommand {
    pub const ALL: [Subcommand; 5] =
        [Subcommand::Forward, Subcommand::Train, Subcommand::Ablate, Subcommand::Probe, Subcommand::Mad];

    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Forward => "forward",
            Subcommand::Train => "train",
            Subcommand::Ablate => "ablate",
            Subcommand::Probe => "probe",
            Subcommand::Mad => "mad",
        }
    }
}

impl std::str::FromStr for Subcommand {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Subcommand::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown subcommand `{s}` (expected forward|train|ablate|probe|mad)"))
    }
}

struct Recorder {
    report: RunReport,
    out: Option<PathBuf>,
}

impl Recorder {
    /// Runs one stage. Returns `None` (and records the error) on failure.
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut RunReport) -> Result<T, String>) -> Option<T> {
        let start = Instant::now();
        let result = f(&mut self.report);
        self.report.timings.insert(name.to_string(), start.elapsed().as_secs_f64());
        let value = match result {
            Ok(v) => Some(v),
            Err(message) => {
                self.report.error = Some(StageError { stage: name.to_string(), message });
                None
            }
        };
        self.flush();
        value
    }

    fn flush(&mut self) {
        if let Some(dir) = &self.out {
            if let Err(e) = self.report.write(&dir.join(REPORT_FILE)) {
                if self.report.error.is_none() {
                    self.report.error = Some(StageError { stage: "output".into(), message: e.to_string() });
                }
            }
        }
    }

    fn artifact(&mut self, rel: &str) -> Option<PathBuf> {
        let dir = self.out.as_ref()?;
        self.report.artifacts.push(rel.to_string());
        Some(dir.join(rel))
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Runs `sub` on `cfg`. With `out`, the report and sidecar files are
/// written below that directory.
pub fn run(sub: Subcommand, cfg: &RunConfig, out: Option<&Path>) -> RunReport {
    let seed = cfg.training.seed;
    let mut rec = Recorder { report: RunReport::new(sub.name(), seed, cfg.entries()), out: out.map(Path::to_path_buf) };
    let Some(inst) = rec.stage("data", |_| synthetic::generate(&cfg.data, seed).map_err(err)) else {
        return rec.report;
    };
    match sub {
        Subcommand::Forward => run_forward(&mut rec, cfg, &inst),
        Subcommand::Train => run_train(&mut rec, cfg, &inst, true),
        Subcommand::Mad => run_train(&mut rec, cfg, &inst, false),
        Subcommand::Ablate => run_ablate(&mut rec, cfg, &inst),
        Subcommand::Probe => run_probe(&mut rec, cfg, &inst),
    }
    rec.flush();
    rec.report
}

fn run_forward(rec: &mut Recorder, cfg: &RunConfig, inst: &Instance) {
    let params = ModelParams::init(&cfg.model, cfg.training.seed);
    let ok = rec.stage("forward", |r| {
        let fwd = forward(&cfg.model, &params, inst).map_err(err)?;
        r.losses.push(LossRecord { step: 0, total: fwd.loss.total, seg: fwd.loss.seg, align: fwd.loss.align });
        Ok(())
    });
    if ok.is_none() {
        return;
    }
    invariants(rec, cfg, &params, inst);
    if mad_profiles(rec, cfg, &params, inst, None).is_none() {
        return;
    }
    if cfg.output.heatmaps {
        heatmaps(rec, cfg, &params, inst);
    }
}

fn invariants(rec: &mut Recorder, cfg: &RunConfig, params: &ModelParams, inst: &Instance) {
    rec.stage("invariants", |r| {
        r.invariants = invariant_suite(&cfg.model, params, inst);
        Ok(())
    });
}

/// Records MAD per layer; with `start`, the values become the end of an
/// existing profile.
fn mad_profiles(
    rec: &mut Recorder,
    cfg: &RunConfig,
    params: &ModelParams,
    inst: &Instance,
    start: Option<Vec<MadProfile>>,
) -> Option<Vec<MadProfile>> {
    let name = if start.is_some() { "mad_end" } else { "mad_start" };
    rec.stage(name, |r| {
        let fwd = forward(&cfg.model, params, inst).map_err(err)?;
        let mut profiles = Vec::with_capacity(fwd.layers.len());
        for (l, t) in fwd.layers.iter().enumerate() {
            let (b, a) = layer_mad(t, inst.grid)?;
            let profile = match &start {
                None => MadProfile {
                    layer: l,
                    backbone: b.map(|v| MadPair { start: v, end: None }),
                    agent: MadPair { start: a, end: None },
                },
                Some(s) => MadProfile {
                    layer: l,
                    backbone: s[l].backbone.map(|p| MadPair { start: p.start, end: b }),
                    agent: MadPair { start: s[l].agent.start, end: Some(a) },
                },
            };
            profiles.push(profile);
        }
        r.mad = profiles.clone();
        Ok(profiles)
    })
}

fn heatmaps(rec: &mut Recorder, cfg: &RunConfig, params: &ModelParams, inst: &Instance) {
    let Some(fwd) = rec.stage("heatmaps", |_| forward(&cfg.model, params, inst).map_err(err)) else {
        return;
    };
    for (l, t) in fwd.layers.iter().enumerate() {
        let maps = [
            (format!("heatmaps/layer{l}_cross_attn.txt"), cross_attn_weights(&t.visual, &fwd.text.f_t)),
            (format!("heatmaps/layer{l}_agent_attn.txt"), t.attention_record().visual_to_text()),
        ];
        for (rel, m) in maps {
            let Some(path) = rec.artifact(&rel) else { return };
            if rec.stage("heatmaps", |_| emit_heatmap(&m.map_err(err)?, &path).map_err(err)).is_none() {
                return;
            }
        }
    }
}

fn run_train(rec: &mut Recorder, cfg: &RunConfig, inst: &Instance, artifacts: bool) {
    let params = ModelParams::init(&cfg.model, cfg.training.seed);
    let Some(start) = mad_profiles(rec, cfg, &params, inst, None) else { return };
    let lr = LearningRates { decoder: cfg.training.lr_decoder, backbone: cfg.training.lr_backbone };
    let trained = rec.stage("train", |r| {
        match train(cfg.training.steps, TrainState::new(params, lr), &cfg.model, std::slice::from_ref(inst)) {
            Ok(state) => {
                r.losses = state.history.clone();
                Ok(state.params)
            }
            Err(abort) => {
                r.losses = abort.state.history.clone();
                Err(abort.to_string())
            }
        }
    });
    let Some(params) = trained else { return };
    invariants(rec, cfg, &params, inst);
    if mad_profiles(rec, cfg, &params, inst, Some(start)).is_none() {
        return;
    }
    if artifacts && cfg.output.trajectories {
        if let Some(path) = rec.artifact("trajectories/loss.txt") {
            let table = Table {
                columns: vec!["step".into(), "total".into(), "seg".into(), "align".into()],
                rows: rec.report.losses.iter().map(|l| vec![l.step as f64, l.total, l.seg, l.align]).collect(),
            };
            rec.stage("trajectories", |_| table.write(&path).map_err(err));
        }
    }
    if artifacts && cfg.output.heatmaps {
        heatmaps(rec, cfg, &params, inst);
    }
}

/// Every ablation variant as `(group, variant, config)`.
pub fn ablation_variants(base: &RunConfig) -> Vec<(String, String, RunConfig)> {
    let mut out = Vec::new();
    for s in SelectionStrategy::ALL {
        let mut c = base.clone();
        c.model.selection.strategy = s;
        out.push(("selection".to_string(), s.name().to_string(), c));
    }
    for cost in CostVariant::ALL {
        let mut c = base.clone();
        c.model.transport.cost = cost;
        out.push(("transport.cost".to_string(), cost.name().to_string(), c));
    }
    for mode in [PoolMode::Dual, PoolMode::SingleGamma] {
        let mut c = base.clone();
        c.model.pooling.mode = mode;
        out.push(("pooling.scalar".to_string(), mode.name().to_string(), c));
    }
    for w in Wiring::all() {
        let mut c = base.clone();
        c.model.attention.wiring = w;
        out.push(("attention.wiring".to_string(), w.code(), c));
    }
    out
}

fn ablation_row(group: String, variant: String, cfg: &RunConfig, inst: &Instance) -> AblationRow {
    let mut row = AblationRow { group, variant, initial_loss: None, final_loss: None, passed: false, failures: Vec::new() };
    if let Err(e) = cfg.validate() {
        row.failures.push(format!("config: {e}"));
        return row;
    }
    let params = ModelParams::init(&cfg.model, cfg.training.seed);
    let lr = LearningRates { decoder: cfg.training.lr_decoder, backbone: cfg.training.lr_backbone };
    let state = match train(cfg.training.steps, TrainState::new(params, lr), &cfg.model, std::slice::from_ref(inst)) {
        Ok(s) => s,
        Err(abort) => {
            row.initial_loss = abort.state.history.first().map(|h| h.total);
            row.failures.push(format!("train: {abort}"));
            return row;
        }
    };
    row.initial_loss = state.history.first().map(|h| h.total);
    match forward(&cfg.model, &state.params, inst) {
        Ok(f) => row.final_loss = Some(f.loss.total),
        Err(e) => {
            row.failures.push(format!("forward: {e}"));
            return row;
        }
    }
    row.failures = invariant_suite(&cfg.model, &state.params, inst)
        .into_iter()
        .filter(|r| !r.passed)
        .map(|r| r.name)
        .collect();
    row.passed = row.failures.is_empty();
    row
}

fn run_ablate(rec: &mut Recorder, cfg: &RunConfig, inst: &Instance) {
    let params = ModelParams::init(&cfg.model, cfg.training.seed);
    invariants(rec, cfg, &params, inst);
    for (group, variant, c) in ablation_variants(cfg) {
        let stage = format!("ablate/{group}/{variant}");
        rec.stage(&stage, |r| {
            r.ablation.push(ablation_row(group, variant, &c, inst));
            Ok(())
        });
    }
}

fn run_probe(rec: &mut Recorder, cfg: &RunConfig, inst: &Instance) {
    let params = ModelParams::init(&cfg.model, cfg.training.seed);
    invariants(rec, cfg, &params, inst);
    let p = &cfg.probe;
    let seen: Vec<usize> = (0..p.seen).collect();
    let unseen: Vec<usize> = (p.seen..p.seen + p.unseen).collect();
    let runs = rec.stage("probe", |r| {
        for i in 0..p.seeds {
            let seed = cfg.training.seed.wrapping_add(i as u64);
            let baseline = probe_simulation(&p.sim, &seen, &unseen, p.steps, false, seed).map_err(err)?;
            let agent = probe_simulation(&p.sim, &seen, &unseen, p.steps, true, seed).map_err(err)?;
            r.probe.push(ProbeRun { seed, baseline, agent });
        }
        let summary = ProbeSummary {
            seeds: r.probe.len(),
            baseline_decayed: r.probe.iter().filter(|x| x.baseline.final_activation() < x.baseline.initial_activation()).count(),
            agent_at_least_baseline: r.probe.iter().filter(|x| x.agent.final_activation() >= x.baseline.final_activation()).count(),
        };
        r.probe_summary = Some(summary);
        Ok(r.probe.clone())
    });
    let Some(runs) = runs else { return };
    if !cfg.output.trajectories {
        return;
    }
    let mut columns = vec!["step".to_string()];
    for x in &runs {
        columns.push(format!("baseline_s{}", x.seed));
        columns.push(format!("agent_s{}", x.seed));
    }
    let table = |pick: &dyn Fn(&ProbeRun, bool) -> Vec<f64>| Table {
        columns: columns.clone(),
        rows: (0..=p.steps)
            .map(|s| {
                let mut row = vec![s as f64];
                for x in &runs {
                    row.push(pick(x, false)[s]);
                    row.push(pick(x, true)[s]);
                }
                row
            })
            .collect(),
    };
    let activation = |x: &ProbeRun, agent: bool| {
        if agent { x.agent.unseen_activation.clone() } else { x.baseline.unseen_activation.clone() }
    };
    let accuracy = |x: &ProbeRun, agent: bool| {
        if agent { x.agent.seen_accuracy.clone() } else { x.baseline.seen_accuracy.clone() }
    };
    for (rel, t) in [("trajectories/probe_unseen_activation.txt", table(&activation)), ("trajectories/probe_seen_accuracy.txt", table(&accuracy))] {
        let Some(path) = rec.artifact(rel) else { return };
        if rec.stage("trajectories", |_| t.write(&path).map_err(err)).is_none() {
            return;
        }
    }
}
