//! `xbof`: run, sweep and validate JBOF simulation scenarios.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use xbof_sim::config::{ScenarioConfig, Variant, WorkloadBinding, WorkloadSource};
use xbof_sim::metrics::Report;
use xbof_sim::presets;
use xbof_sim::sim::Sim;

#[derive(Parser, Debug)]
#[command(name = "xbof", version, about = "Discrete-event simulator of a harvesting CXL JBOF")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run one scenario and write report.json, summary.csv and config.toml.
    Run {
        /// Scenario file, or the name of a built-in preset.
        #[arg(long)]
        config: String,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replay this trace on every device instead of the configured workloads.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Simulated duration in ms.
        #[arg(long)]
        duration: Option<f64>,
        /// Write one line per dispatched event to events.log.
        #[arg(long)]
        event_trace: bool,
        /// Dotted-path override, e.g. `--set harvest.watermark=0.8`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run a preset grid in parallel.
    Sweep {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value = "sweep-out")]
        out: PathBuf,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Check a scenario file without running it.
    Validate {
        #[arg(long)]
        config: String,
    },
    /// List built-in scenarios and sweeps.
    List,
    /// Write every built-in scenario as `<dir>/<name>.toml`.
    Export {
        #[arg(long, default_value = "scenarios")]
        dir: PathBuf,
    },
}

fn load(config: &str, set: &[String]) -> Result<ScenarioConfig> {
    let path = Path::new(config);
    let text = if path.exists() {
        std::fs::read_to_string(path).with_context(|| format!("reading {config}"))?
    } else if let Some(c) = presets::scenario(config) {
        c.to_toml()
    } else {
        bail!("{config}: no such file or preset");
    };
    Ok(ScenarioConfig::load_with_overrides(&text, set)?)
}

/// Invariant violations that make a run fail.
fn check(r: &Report) -> Vec<String> {
    let i = &r.integrity;
    let mut v = Vec::new();
    if i.violations > 0 {
        v.push(format!(
            "{} integrity violations, first: {}",
            i.violations,
            i.first_violation.clone().unwrap_or_default()
        ));
    }
    if i.duplicate_completions > 0 {
        v.push(format!("{} duplicate completions", i.duplicate_completions));
    }
    if i.lost_commands > 0 {
        v.push(format!("{} commands never completed", i.lost_commands));
    }
    v
}

fn print_summary(r: &Report) {
    let a = &r.aggregate;
    println!(
        "{} [{}] seed={} commands={} errors={} throughput={:.3} GB/s mean={:.1} us p99={:.1} us proc={:.3} flash={:.3}",
        r.scenario,
        r.variant,
        r.seed,
        a.commands,
        a.errors,
        a.throughput_gbps,
        a.latency.mean_ns / 1e3,
        a.latency.p99_ns as f64 / 1e3,
        a.proc_util,
        a.flash_util
    );
}

#[allow(clippy::too_many_arguments)]
fn run(
    config: &str,
    variant: Option<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    trace: Option<PathBuf>,
    duration: Option<f64>,
    event_trace: bool,
    set: &[String],
) -> Result<bool> {
    let mut cfg = load(config, set)?;
    if let Some(v) = variant {
        cfg.variant = Variant::parse(&v)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = duration {
        cfg.duration_ms = d;
        cfg.warmup_ms = cfg.warmup_ms.min(d / 2.0);
    }
    if let Some(t) = trace {
        cfg.workloads = vec![WorkloadBinding {
            devices: (0..cfg.ssd_count).collect(),
            source: WorkloadSource::Trace {
                path: t.display().to_string(),
            },
            start_ms: 0.0,
            stop_ms: None,
        }];
    }
    cfg.event_trace |= event_trace;
    let out = out
        .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let mut sim = Sim::new(cfg.clone())?;
    sim.run_until(u64::MAX)?;
    if let Some(ev) = sim.event_trace() {
        std::fs::create_dir_all(&out)?;
        std::fs::write(out.join("events.log"), ev.join("\n") + "\n")?;
    }
    let report = sim.into_report()?;
    report.write_to(&out)?;
    print_summary(&report);
    let bad = check(&report);
    for b in &bad {
        eprintln!("invariant violated: {b}");
    }
    Ok(bad.is_empty())
}

fn sweep(preset: &str, out: &Path, duration: Option<f64>, set: &[String]) -> Result<bool> {
    let Some(mut grid) = presets::sweep(preset) else {
        bail!("unknown sweep preset {preset}; try one of {:?}", presets::SWEEPS);
    };
    for c in &mut grid {
        let name = c.name.clone();
        *c = ScenarioConfig::load_with_overrides(&c.to_toml(), set)?;
        c.name = name;
        if let Some(d) = duration {
            c.duration_ms = d;
            c.warmup_ms = c.warmup_ms.min(d / 2.0);
        }
    }
    let results: Vec<Result<Report>> = grid
        .par_iter()
        .map(|c| {
            let r = xbof_sim::sim::run(c.clone())?;
            r.write_to(&out.join(&c.name))?;
            Ok(r)
        })
        .collect();
    let mut ok = true;
    let mut csv = String::from("scenario,variant,ssds,commands,throughput_gbps,mean_ns,p99_ns,proc_util,flash_util\n");
    for r in results {
        let r = r?;
        print_summary(&r);
        let a = &r.aggregate;
        csv.push_str(&format!(
            "{},{},{},{},{:.6},{:.1},{},{:.6},{:.6}\n",
            r.scenario,
            r.variant,
            r.devices.len(),
            a.commands,
            a.throughput_gbps,
            a.latency.mean_ns,
            a.latency.p99_ns,
            a.proc_util,
            a.flash_util
        ));
        for b in check(&r) {
            eprintln!("{}: invariant violated: {b}", r.scenario);
            ok = false;
        }
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("sweep.csv"), csv)?;
    Ok(ok)
}

fn export(dir: &Path) -> Result<bool> {
    std::fs::create_dir_all(dir)?;
    for n in presets::SCENARIOS {
        let c = presets::scenario(n).expect("listed preset");
        std::fs::write(dir.join(format!("{n}.toml")), c.to_toml())?;
    }
    println!("wrote {} scenarios to {}", presets::SCENARIOS.len(), dir.display());
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run {
            config,
            variant,
            seed,
            out,
            trace,
            duration,
            event_trace,
            set,
        } => run(&config, variant, seed, out, trace, duration, event_trace, &set),
        Cmd::Sweep {
            preset,
            out,
            duration,
            set,
        } => sweep(&preset, &out, duration, &set),
        Cmd::Validate { config } => load(&config, &[]).and_then(|c| {
            Sim::new(c.clone())?;
            println!("{config}: ok ({} SSDs, variant {})", c.ssd_count, c.variant);
            Ok(true)
        }),
        Cmd::List => {
            println!("scenarios: {}", presets::SCENARIOS.join(", "));
            println!("sweeps: {}", presets::SWEEPS.join(", "));
            Ok(true)
        }
        Cmd::Export { dir } => export(&dir),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
