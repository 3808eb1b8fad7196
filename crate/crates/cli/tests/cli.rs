use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use xagent_cli::config::parse_config;
use xagent_cli::heatmap::{read_heatmap, Table};
use xagent_cli::invariants::INVARIANT_NAMES;
use xagent_cli::run::{run, Subcommand, REPORT_FILE};
use xagent_cli::{RunConfig, RunReport};

fn smoke_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.conf")
}

fn smoke(extra: &[(&str, &str)]) -> RunConfig {
    let overrides: Vec<(String, String)> = extra.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    parse_config(Some(&smoke_path()), &overrides).unwrap()
}

fn quick() -> RunConfig {
    smoke(&[("training.steps", "5"), ("probe.seeds", "2"), ("probe.steps", "20"), ("probe.agent_steps", "10")])
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn every_subcommand_is_deterministic_modulo_timings() {
    let cfg = quick();
    for sub in Subcommand::ALL {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = run(sub, &cfg, Some(a.path()));
        let rb = run(sub, &cfg, Some(b.path()));
        assert!(ra.error.is_none(), "{sub:?}: {:?}", ra.error);
        assert_eq!(ra.to_json_without_timings(), rb.to_json_without_timings(), "{sub:?}");
        for rel in &ra.artifacts {
            assert_eq!(read(&a.path().join(rel)), read(&b.path().join(rel)), "{sub:?} {rel}");
        }
    }
}

#[test]
fn report_on_disk_round_trips() {
    let cfg = quick();
    let dir = tempfile::tempdir().unwrap();
    let report = run(Subcommand::Train, &cfg, Some(dir.path()));
    let text = String::from_utf8(read(&dir.path().join(REPORT_FILE))).unwrap();
    let back = RunReport::from_json(&text).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.to_json(), text);
}

#[test]
fn invariant_list_is_pinned() {
    assert_eq!(
        INVARIANT_NAMES,
        [
            "transport.marginals",
            "selection.agent_count",
            "selection.unique_sources",
            "pooling.mask_columns",
            "pooling.gamma_reparam",
            "attention.branch_row_sums",
            "attention.differential_row_sums",
            "attention.output_shape",
            "attention.residual_identity",
            "model.finite",
            "model.deterministic",
            "model.shared_block_census",
            "losses.align_nonnegative",
            "losses.temperatures_positive",
            "mad.bounds",
            "gradients.finite_difference",
        ]
    );
    let cfg = quick();
    for sub in Subcommand::ALL {
        let report = run(sub, &cfg, None);
        let names: Vec<&str> = report.invariants.iter().map(|i| i.name.as_str()).collect();
        assert_eq!(names, INVARIANT_NAMES, "{sub:?}");
    }
}

#[test]
fn smoke_forward_passes_quickly() {
    let cfg = smoke(&[]);
    let start = Instant::now();
    let report = run(Subcommand::Forward, &cfg, None);
    let secs = start.elapsed().as_secs_f64();
    assert!(report.all_passed(), "{:#?}", report.invariants.iter().filter(|i| !i.passed).collect::<Vec<_>>());
    assert!(secs < 5.0, "{secs}s");
    assert_eq!(report.mad.len(), 2);
    assert!(report.mad.iter().all(|m| m.agent.end.is_none()));
}

#[test]
fn emitted_files_parse_back() {
    let cfg = quick();
    for sub in [Subcommand::Train, Subcommand::Probe] {
        let dir = tempfile::tempdir().unwrap();
        let report = run(sub, &cfg, Some(dir.path()));
        assert!(!report.artifacts.is_empty());
        for rel in &report.artifacts {
            let path = dir.path().join(rel);
            let text = String::from_utf8(read(&path)).unwrap();
            if rel.starts_with("heatmaps/") {
                let m = read_heatmap(&path).unwrap();
                let header: Vec<&str> = text.lines().next().unwrap().split(' ').collect();
                assert_eq!(header[..2], [m.rows().to_string(), m.cols().to_string()]);
                assert_eq!(header[2].parse::<f64>().unwrap(), m.min());
                assert_eq!(header[3].parse::<f64>().unwrap(), m.max());
            } else {
                let t = Table::parse(&text).unwrap();
                assert_eq!(t.render(), text);
            }
        }
    }
}

#[test]
fn cross_and_agent_heatmaps_differ() {
    let cfg = quick();
    let dir = tempfile::tempdir().unwrap();
    let report = run(Subcommand::Forward, &cfg, Some(dir.path()));
    for l in 0..cfg.dims.layers {
        let cross = dir.path().join(format!("heatmaps/layer{l}_cross_attn.txt"));
        let agent = dir.path().join(format!("heatmaps/layer{l}_agent_attn.txt"));
        assert!(report.artifacts.iter().any(|a| a.ends_with(&format!("layer{l}_agent_attn.txt"))));
        let (c, a) = (read_heatmap(&cross).unwrap(), read_heatmap(&agent).unwrap());
        assert_eq!(c.shape(), (cfg.dims.n, cfg.dims.nc));
        assert_eq!(a.shape(), c.shape());
        assert_ne!(read(&cross), read(&agent));
    }
}

#[test]
fn train_and_mad_record_start_and_end_profiles() {
    let cfg = quick();
    let report = run(Subcommand::Mad, &cfg, None);
    assert_eq!(report.losses.len(), 5);
    for m in &report.mad {
        assert!(m.agent.end.is_some());
        assert!(m.backbone.unwrap().end.is_some());
    }
}

#[test]
fn ablation_emits_one_row_per_variant() {
    let cfg = quick();
    let report = run(Subcommand::Ablate, &cfg, None);
    assert_eq!(report.ablation.len(), 5 + 3 + 2 + 9);
    let mut keys: Vec<(String, String)> = report.ablation.iter().map(|r| (r.group.clone(), r.variant.clone())).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), 19);
}

#[test]
fn divergent_training_flushes_a_partial_report() {
    let cfg = smoke(&[("training.lr_decoder", "1e305"), ("training.lr_backbone", "1e305")]);
    let dir = tempfile::tempdir().unwrap();
    let report = run(Subcommand::Train, &cfg, Some(dir.path()));
    let err = report.error.clone().expect("training should abort");
    assert_eq!(err.stage, "train");
    assert!(!report.all_passed());
    let on_disk = RunReport::from_json(&String::from_utf8(read(&dir.path().join(REPORT_FILE))).unwrap()).unwrap();
    assert_eq!(on_disk.error, Some(err));
    assert!(!on_disk.losses.is_empty());
    assert!(on_disk.mad.iter().all(|m| m.agent.end.is_none()));
}

fn xagent() -> Command {
    Command::new(env!("CARGO_BIN_EXE_xagent"))
}

#[test]
fn binary_exit_codes_and_output_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let flag_out = dir.path().join("flag");
    let env_out = dir.path().join("env");
    let status = xagent()
        .args(["forward", "--config"])
        .arg(smoke_path())
        .args(["--set", "training.steps=3", "--seed", "9", "--out"])
        .arg(&flag_out)
        .env("XAGENT_OUT", &env_out)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(!flag_out.exists());
    let report = RunReport::from_json(&String::from_utf8(read(&env_out.join(REPORT_FILE))).unwrap()).unwrap();
    assert_eq!(report.seed, 9);
    assert_eq!(report.config["training.seed"], "9");
    assert_eq!(report.config["training.steps"], "3");

    let bad = xagent().args(["forward", "--set", "selection.k=0", "--out"]).arg(&flag_out).env_remove("XAGENT_OUT").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("selection.k"));

    let unknown = xagent().args(["forward", "--set", "selection.kk=1", "--out"]).arg(&flag_out).env_remove("XAGENT_OUT").output().unwrap();
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("unknown key"));

    let diverge = xagent()
        .args(["train", "--config"])
        .arg(smoke_path())
        .args(["--set", "training.lr_decoder=1e305", "--out"])
        .arg(&flag_out)
        .env_remove("XAGENT_OUT")
        .output()
        .unwrap();
    assert_eq!(diverge.status.code(), Some(1));
    assert!(flag_out.join(REPORT_FILE).exists());
}
