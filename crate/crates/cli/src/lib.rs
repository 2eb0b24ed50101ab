//! Command-line front end for the simulator.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use qkdn_core::harness::{
    compare_delivery_modes, load_scenario, parse_scenario, run_with_log, write_log, Network,
    ScenarioConfig,
};
use qkdn_core::time::SimTime;

pub mod serve;

/// Scenarios compiled into the binary, usable by name.
pub const BUILTIN: &[(&str, &str)] = &[
    ("telaviv", include_str!("../../../scenarios/telaviv.toml")),
    ("turin", include_str!("../../../scenarios/turin.toml")),
];

/// Exit status when a run breaks a bookkeeping invariant.
pub const EXIT_INVARIANT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "qkdn", version, about = "Deterministic QKD network simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario to its end and emit the JSON report.
    Run {
        /// Scenario file, or the name of a built-in scenario.
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the scenario duration (virtual seconds).
        #[arg(long)]
        duration: Option<f64>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the JSONL event log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run a scenario once with pushed and once with polled key delivery.
    CompareDelivery {
        scenario: String,
        #[arg(long, default_value_t = 1.0)]
        poll_period: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Print the controller's topology view after a short warm-up.
    TopoDump {
        #[arg(default_value = "turin")]
        scenario: String,
        /// Virtual time at which to take the snapshot.
        #[arg(long, default_value_t = 5.0)]
        at: f64,
    },
    /// Parse and cross-check a scenario file.
    Validate { scenario: String },
    /// Serve the key delivery API of a running scenario over HTTP.
    Serve {
        scenario: String,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Virtual seconds to simulate before accepting requests.
        #[arg(long, default_value_t = 30.0)]
        warmup: f64,
    },
}

/// Load `arg` as a file, falling back to a built-in scenario of that name.
pub fn resolve_scenario(arg: &str) -> Result<ScenarioConfig> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some((_, text)) = BUILTIN.iter().find(|(name, _)| *name == arg) {
            return Ok(parse_scenario(text)?);
        }
    }
    load_scenario(path).with_context(|| format!("loading scenario {arg}"))
}

fn overridden(arg: &str, seed: Option<u64>, duration: Option<f64>) -> Result<ScenarioConfig> {
    let mut cfg = resolve_scenario(arg)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = duration {
        cfg.duration = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Run every command except `serve`. Returns the process exit status.
pub fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Run {
            scenario,
            seed,
            duration,
            report,
            log,
        } => {
            let cfg = overridden(&scenario, seed, duration)?;
            let (r, records) = run_with_log(&cfg)?;
            if let Some(p) = log {
                let f = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
                write_log(&records, BufWriter::new(f))?;
            }
            let json = r.to_json();
            match report {
                Some(p) => {
                    std::fs::write(&p, json + "\n")
                        .with_context(|| format!("writing {}", p.display()))?;
                    let stored: u64 = r.kmms.values().map(|s| s.bits_stored).sum();
                    writeln!(
                        out,
                        "{}: {} s, {} links, {} bits stored, {} channels, report in {}",
                        r.scenario,
                        r.duration,
                        r.links.len(),
                        stored,
                        r.channels.len(),
                        p.display()
                    )?;
                }
                None => writeln!(out, "{json}")?,
            }
            if !r.invariants.ok() {
                for v in &r.invariants.violations {
                    eprintln!("invariant violated: {v}");
                }
                return Ok(EXIT_INVARIANT);
            }
            Ok(0)
        }
        Command::CompareDelivery {
            scenario,
            poll_period,
            seed,
            duration,
        } => {
            anyhow::ensure!(
                poll_period > 0.0 && poll_period.is_finite(),
                "poll period must be positive"
            );
            let cfg = overridden(&scenario, seed, duration)?;
            let cmp = compare_delivery_modes(&cfg, poll_period)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&cmp)?)?;
            Ok(0)
        }
        Command::TopoDump { scenario, at } => {
            let cfg = resolve_scenario(&scenario)?;
            let mut net = Network::new(&cfg)?;
            net.run_until(SimTime::from_secs_f64(at));
            let snap = net.controller().snapshot(net.now());
            writeln!(out, "{}", serde_json::to_string_pretty(&snap)?)?;
            Ok(0)
        }
        Command::Validate { scenario } => {
            let cfg = resolve_scenario(&scenario)?;
            writeln!(
                out,
                "{}: ok ({} nodes, {} links, {} switch groups, {} SAEs, {} events)",
                cfg.name,
                cfg.nodes.len(),
                cfg.links.len(),
                cfg.switch_groups.len(),
                cfg.saes.len(),
                cfg.events.len()
            )?;
            Ok(0)
        }
        Command::Serve { .. } => anyhow::bail!("serve runs through serve::serve"),
    }
}
