//! The JSON run report.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xagent_core::training::{LossRecord, ProbeTrajectory};

/// Result of one named check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantResult {
    pub name: String,
    pub passed: bool,
    /// `None` when the check could not be evaluated.
    pub measured: Option<f64>,
    pub tolerance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MadPair {
    pub start: f64,
    pub end: Option<f64>,
}

/// Mean attention distance of one layer for the encoder self-attention and
/// for the token-to-token map routed through the agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MadProfile {
    pub layer: usize,
    pub backbone: Option<MadPair>,
    pub agent: MadPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRun {
    pub seed: u64,
    pub baseline: ProbeTrajectory,
    pub agent: ProbeTrajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub seeds: usize,
    /// Seeds whose baseline final unseen activation is below its start.
    pub baseline_decayed: usize,
    /// Seeds whose with-agent final activation is at least the baseline's.
    pub agent_at_least_baseline: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: String,
    pub variant: String,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub passed: bool,
    /// Failed invariant names, or the error that stopped the variant.
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub subcommand: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub losses: Vec<LossRecord>,
    pub invariants: Vec<InvariantResult>,
    pub mad: Vec<MadProfile>,
    pub probe: Vec<ProbeRun>,
    pub probe_summary: Option<ProbeSummary>,
    pub ablation: Vec<AblationRow>,
    /// Sidecar files, relative to the output directory.
    pub artifacts: Vec<String>,
    pub error: Option<StageError>,
    /// Wall-clock seconds per stage; the only non-deterministic field.
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn new(subcommand: &str, seed: u64, config: BTreeMap<String, String>) -> Self {
        RunReport {
            subcommand: subcommand.to_string(),
            seed,
            config,
            losses: Vec::new(),
            invariants: Vec::new(),
            mad: Vec::new(),
            probe: Vec::new(),
            probe_summary: None,
            ablation: Vec::new(),
            artifacts: Vec::new(),
            error: None,
            timings: BTreeMap::new(),
        }
    }

    /// No stage failed, every invariant passed and every ablation variant
    /// passed its own invariants.
    pub fn all_passed(&self) -> bool {
        self.error.is_none() && self.invariants.iter().all(|i| i.passed) && self.ablation.iter().all(|r| r.passed)
    }

    pub fn invariant(&self, name: &str) -> Option<&InvariantResult> {
        self.invariants.iter().find(|i| i.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report fields are serializable") + "\n"
    }

    pub fn from_json(text: &str) -> serde_json::Result<RunReport> {
        serde_json::from_str(text)
    }

    /// JSON with the timing block emptied, for determinism comparisons.
    pub fn to_json_without_timings(&self) -> String {
        let mut r = self.clone();
        r.timings.clear();
        r.to_json()
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_keeps_every_bit() {
        let mut r = RunReport::new("forward", 3, BTreeMap::from([("selection.k".into(), "3".into())]));
        r.losses.push(LossRecord { step: 0, total: 1.0 / 3.0, seg: 0.1 + 0.2, align: 1e-300 });
        r.invariants.push(InvariantResult {
            name: "x".into(),
            passed: false,
            measured: None,
            tolerance: 1e-9,
            detail: Some("why".into()),
        });
        r.mad.push(MadProfile { layer: 0, backbone: None, agent: MadPair { start: 0.853_553_390_593_273_7, end: Some(2.0) } });
        r.error = Some(StageError { stage: "train".into(), message: "boom".into() });
        r.timings.insert("forward".into(), 0.25);
        let back = RunReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(!back.all_passed());
    }
}
