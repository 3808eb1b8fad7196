use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use xagent_cli::config::{parse_config, parse_override};
use xagent_cli::run::{run, Subcommand, REPORT_FILE};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Forward,
    Train,
    Ablate,
    Probe,
    Mad,
}

impl From<Command> for Subcommand {
    fn from(c: Command) -> Self {
        match c {
            Command::Forward => Subcommand::Forward,
            Command::Train => Subcommand::Train,
            Command::Ablate => Subcommand::Ablate,
            Command::Probe => Subcommand::Probe,
            Command::Mad => Subcommand::Mad,
        }
    }
}

/// Runs the agent pipeline on synthetic data and writes a JSON report.
///
/// Exits 0 iff every invariant check passed.
#[derive(Debug, Parser)]
#[command(name = "xagent", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline `key=value` override; beats the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (XAGENT_OUT takes precedence).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides training.seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> anyhow::Result<bool> {
    let args = Args::parse();
    let mut overrides = args.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = args.seed {
        overrides.retain(|(k, _)| k != "training.seed");
        overrides.push(("training.seed".into(), seed.to_string()));
    }
    let cfg = parse_config(args.config.as_deref(), &overrides)?;
    let out = std::env::var_os("XAGENT_OUT")
        .map(PathBuf::from)
        .or(args.out)
        .unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let report = run(args.command.into(), &cfg, Some(&out));
    report.write(&out.join(REPORT_FILE)).with_context(|| format!("writing report to {}", out.display()))?;

    for inv in &report.invariants {
        let measured = inv.measured.map_or("n/a".to_string(), |m| format!("{m:.3e}"));
        println!("{} {:34} measured {measured} tol {:.0e}", if inv.passed { "PASS" } else { "FAIL" }, inv.name, inv.tolerance);
    }
    for row in &report.ablation {
        println!("{} ablation {}={} {}", if row.passed { "PASS" } else { "FAIL" }, row.group, row.variant, row.failures.join(", "));
    }
    if let Some(s) = report.probe_summary {
        println!(
            "probe: baseline decayed in {}/{} seeds; with-agent ≥ baseline in {}/{}",
            s.baseline_decayed, s.seeds, s.agent_at_least_baseline, s.seeds
        );
    }
    if let Some(e) = &report.error {
        eprintln!("stage `{}` failed: {}", e.stage, e.message);
    }
    println!("report: {}", out.join(REPORT_FILE).display());
    Ok(report.all_passed())
}
