//! Experiment harness: a flat `key = value` configuration, one runner per
//! experiment, and CSV plus summary artifacts.
//!
//! [`execute`] is pure; [`run_experiment`] additionally writes the artifacts
//! into the output directory. Identical configurations produce identical
//! bytes.

mod config;
pub mod scenarios;

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::covert::{run_channel_traced, ChannelConfig, ChannelVariant, MessagePattern, CHANNEL_CSV_HEADER};
use crate::error::{ConfigError, SimError};
use crate::mem::LatencyClass;
use crate::side::{
    attack_ml_rsa, attack_sqm_rsa, monitor_events, AttackConfig, EventVictim, MlRsaVictim, MonitorConfig,
    MonitorReport, RecoveredSecret, SqmRsaVictim,
};

pub use config::{parse_pairs, ExperimentConfig, ExperimentKind, KEYS};
pub use scenarios::{
    boundary_scenarios, entry_sweep, index_scenarios, invalidate_scenarios, trigger_sweep, BoundaryRow,
    EntryPoint, ScenarioRow, TriggerPoint,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("simulation failed: {0}")]
    Sim(SimError),
}

impl From<SimError> for ExperimentError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => ExperimentError::Config(c),
            other => ExperimentError::Sim(other),
        }
    }
}

impl ExperimentError {
    /// 1 for configuration and simulation failures, 2 for I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::Sim(_) => 1,
            ExperimentError::Io { .. } => 2,
        }
    }
}

/// Artifacts of one run, in write order. `summary.txt` and `config.txt` are
/// always present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentOutput {
    pub files: Vec<(String, String)>,
}

impl ExperimentOutput {
    pub fn file(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str())
    }

    pub fn summary(&self) -> &str {
        self.file("summary.txt").unwrap_or("")
    }
}

pub fn execute(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    cfg.validate()?;
    let mut files = match cfg.experiment {
        ExperimentKind::TriggerSweep => run_trigger(cfg)?,
        ExperimentKind::EntrySweep => run_entry(cfg)?,
        ExperimentKind::IndexScenarios => {
            let rows = index_scenarios(&cfg.sim_config())?;
            scenario_files("index.csv", "Indexing", &rows)
        }
        ExperimentKind::BoundaryScenarios => run_boundary(cfg)?,
        ExperimentKind::InvalidateScenarios => {
            let rows = invalidate_scenarios(&cfg.sim_config())?;
            scenario_files("invalidate.csv", "Invalidation", &rows)
        }
        ExperimentKind::CovertFlush => run_covert(cfg, ChannelVariant::FlushBased)?,
        ExperimentKind::CovertEvict => run_covert(cfg, ChannelVariant::EvictionBased)?,
        ExperimentKind::SqmRsa | ExperimentKind::MlRsa => run_rsa(cfg)?,
        ExperimentKind::Keystroke | ExperimentKind::Network => run_monitor(cfg)?,
    };
    files.push(("config.txt".into(), cfg.to_text()));
    Ok(ExperimentOutput { files })
}

/// Runs the experiment and writes its artifacts under `cfg.out`. Returns the
/// written paths.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, ExperimentError> {
    let output = execute(cfg)?;
    fs::create_dir_all(&cfg.out).map_err(|source| ExperimentError::Io {
        path: cfg.out.clone(),
        source,
    })?;
    let mut written = Vec::with_capacity(output.files.len());
    for (name, content) in &output.files {
        let path = cfg.out.join(name);
        fs::write(&path, content).map_err(|source| ExperimentError::Io {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}

type Files = Vec<(String, String)>;

fn run_trigger(cfg: &ExperimentConfig) -> Result<Files, ExperimentError> {
    let points = trigger_sweep(&cfg.sim_config(), cfg.max_misses, cfg.trials)?;
    let mut s = String::from("Probe latency after n training misses\n\n");
    let _ = writeln!(s, "{:>6}  {:>10} {:>9}  {:>10} {:>9}", "misses", "same-core", "optimized", "cross-core", "optimized");
    for n in 1..=cfg.max_misses {
        let mut cells = Vec::new();
        for cross in [false, true] {
            let pts: Vec<_> = points.iter().filter(|p| p.misses == n && p.cross_core == cross).collect();
            let mean = pts.iter().map(|p| f64::from(p.latency)).sum::<f64>() / pts.len().max(1) as f64;
            let opt = pts.iter().filter(|p| p.class == LatencyClass::OptimizedMiss).count();
            cells.push(format!("{mean:>10.1} {:>9}", format!("{opt}/{}", pts.len())));
        }
        let _ = writeln!(s, "{n:>6}  {}  {}", cells[0], cells[1]);
    }
    let onset = (1..=cfg.max_misses).find(|&n| {
        points
            .iter()
            .filter(|p| p.misses >= n)
            .all(|p| p.class == LatencyClass::OptimizedMiss)
    });
    match onset {
        Some(n) => {
            let _ = writeln!(s, "\nevery probe is an optimized miss from {n} training misses on");
        }
        None => {
            let _ = writeln!(s, "\nno training count yields optimized misses throughout");
        }
    }
    Ok(vec![
        ("trigger_sweep.csv".into(), scenarios::trigger_csv(&points)),
        ("summary.txt".into(), s),
    ])
}

fn run_entry(cfg: &ExperimentConfig) -> Result<Files, ExperimentError> {
    let points = entry_sweep(&cfg.sim_config(), cfg.max_pages)?;
    let mut s = String::from("Latency of the first primed page after priming N pages\n\n");
    let first: Vec<_> = points.iter().filter(|p| p.probed == 1).collect();
    let last_primed = first
        .iter()
        .take_while(|p| p.class == LatencyClass::OptimizedMiss)
        .last()
        .map_or(0, |p| p.pages);
    let _ = writeln!(s, "page 1 stays primed up to N = {last_primed}");
    for p in points.iter().filter(|p| p.pages == last_primed + 1) {
        let _ = writeln!(s, "at N = {}: page {} -> {} ({} cycles)", p.pages, p.probed, p.class, p.latency);
    }
    let _ = writeln!(s, "estimated table capacity: {last_primed} entries");
    Ok(vec![
        ("entry_sweep.csv".into(), scenarios::entry_csv(&points)),
        ("summary.txt".into(), s),
    ])
}

fn scenario_files(csv_name: &str, title: &str, rows: &[ScenarioRow]) -> Files {
    let mut s = format!("{title} scenarios\n\n");
    let _ = writeln!(s, "{:<9} {:<48} {:<4} {:<13} {:<10} {}", "scenario", "setup", "page", "class", "trigger", "expected");
    for r in rows {
        let yn = |b: bool| if b { "trigger" } else { "no trigger" };
        let _ = writeln!(
            s,
            "{:<9} {:<48} {:<4} {:<13} {:<10} {}",
            r.scenario,
            r.setup,
            r.page,
            r.class.as_str(),
            yn(r.triggered()),
            yn(r.expected_trigger)
        );
    }
    let matched = rows.iter().filter(|r| r.matches()).count();
    let _ = writeln!(s, "\n{matched}/{} rows match the expected trigger column", rows.len());
    vec![
        (csv_name.into(), scenarios::scenario_csv(rows)),
        ("summary.txt".into(), s),
    ]
}

fn run_boundary(cfg: &ExperimentConfig) -> Result<Files, ExperimentError> {
    let rows = boundary_scenarios(&cfg.sim_config())?;
    let mut s = String::from("Training page P, probing P and P + 4 KiB\n\n");
    for r in &rows {
        let _ = writeln!(s, "{:<5} P: {:<13} P+1: {}", r.size.label(), r.trained.class.as_str(), r.next.class);
    }
    let crossed = rows.iter().any(|r| r.next.class == LatencyClass::OptimizedMiss);
    let _ = writeln!(
        s,
        "\nprefetching {} a 4 KiB boundary",
        if crossed { "crossed" } else { "never crossed" }
    );
    Ok(vec![
        ("boundary.csv".into(), scenarios::boundary_csv(&rows)),
        ("summary.txt".into(), s),
    ])
}

fn run_covert(cfg: &ExperimentConfig, variant: ChannelVariant) -> Result<Files, ExperimentError> {
    let sim = cfg.sim_config();
    let mut channel = ChannelConfig::new(variant).with_noise(sim.noise.clone());
    channel.machine = sim.machine;
    channel.rounds_per_bit = cfg.rounds_per_bit;
    let patterns: Vec<MessagePattern> = match cfg.pattern {
        Some(p) => vec![p],
        None => MessagePattern::ALL.to_vec(),
    };
    let mut csv = format!("{CHANNEL_CSV_HEADER}\n");
    let mut s = format!(
        "{variant} channel, {} bits per pattern, spurious walk probability {}\n\n",
        cfg.bits,
        channel.noise.spurious_walk_prob
    );
    let _ = writeln!(s, "{:<12} {:>14} {:>10} {:>8}", "pattern", "throughput", "error", "errors");
    let mut files = Files::new();
    let mut throughput = Vec::new();
    for pattern in patterns {
        let message = pattern.generate(cfg.bits, cfg.seed);
        let run = run_channel_traced(&message, &channel)?;
        let st = &run.stats;
        let _ = writeln!(csv, "{}", st.csv_row(pattern.as_str()));
        let _ = writeln!(
            s,
            "{:<12} {:>14} {:>9.3}% {:>8}",
            pattern.as_str(),
            human_rate(st.throughput_bytes_per_sec),
            100.0 * st.error_rate,
            st.errors
        );
        throughput.push((pattern, st.throughput_bytes_per_sec));
        if cfg.trace {
            files.push((format!("trace_{pattern}.csv"), run.trace.to_csv_string()));
        }
    }
    let get = |p| throughput.iter().find(|(q, _)| *q == p).map(|(_, t)| *t);
    if let (Some(ones), Some(alt)) = (get(MessagePattern::Ones), get(MessagePattern::Alternating)) {
        let _ = writeln!(s, "\nall-ones : alternating throughput = {:.1} : 1", ones / alt);
    }
    files.insert(0, ("channel.csv".into(), csv));
    files.push(("summary.txt".into(), s));
    Ok(files)
}

fn human_rate(bytes_per_sec: f64) -> String {
    if bytes_per_sec >= 1024.0 * 1024.0 {
        format!("{:.3} MiB/s", bytes_per_sec / (1024.0 * 1024.0))
    } else {
        format!("{:.1} KiB/s", bytes_per_sec / 1024.0)
    }
}

fn run_rsa(cfg: &ExperimentConfig) -> Result<Files, ExperimentError> {
    let sim = cfg.sim_config();
    let attack = AttackConfig {
        repetitions: cfg.reps,
        noise: sim.noise,
        machine: sim.machine,
        ..AttackConfig::default()
    };
    let exponent = cfg.effective_exponent();
    let (label, secret): (&str, RecoveredSecret) = match cfg.experiment {
        ExperimentKind::SqmRsa => (
            "square-and-multiply",
            attack_sqm_rsa(&SqmRsaVictim::from_value(exponent, cfg.exponent_bits), &attack)?,
        ),
        _ => (
            "montgomery ladder",
            attack_ml_rsa(&MlRsaVictim::from_value(exponent, cfg.exponent_bits), &attack)?,
        ),
    };
    let recovered = secret.to_u64();
    let width = cfg.exponent_bits.div_ceil(4).max(1);
    let mut s = format!("Exponent recovery against the {label} victim\n\n");
    let _ = writeln!(s, "secret      {exponent:#0w$x}", w = width + 2);
    let _ = writeln!(s, "recovered   {recovered:#0w$x}", w = width + 2);
    let _ = writeln!(s, "exact       {}", if recovered == exponent { "yes" } else { "no" });
    let _ = writeln!(s, "confidence  {:.3}", secret.confidence);
    let _ = writeln!(s, "repetitions {}", secret.repetitions);
    let _ = writeln!(s, "\n{:>3} {:>6} {:>5}", "bit", "votes", "value");
    for (i, (&v, &b)) in secret.per_bit_votes.iter().zip(&secret.bits).enumerate() {
        let _ = writeln!(s, "{i:>3} {:>6} {:>5}", format!("{v}/{}", secret.repetitions), u8::from(b));
    }
    Ok(vec![
        ("bits.csv".into(), secret.bits_csv()),
        ("summary.txt".into(), s),
    ])
}

fn monitor_config(cfg: &ExperimentConfig, victim: &EventVictim, xpt_enabled: bool) -> MonitorConfig {
    let sim = cfg.sim_config();
    let mut machine = sim.machine;
    machine.xpt.enabled = xpt_enabled;
    let last = victim.event_schedule.last().copied().unwrap_or(0);
    MonitorConfig {
        poll_budget: u64::MAX,
        until_cycle: Some(last + MONITOR_TAIL_CYCLES),
        noise: sim.noise,
        machine,
        costs: sim.costs,
    }
}

/// Polling continues this long after the last event.
const MONITOR_TAIL_CYCLES: u64 = 200_000;

fn run_monitor(cfg: &ExperimentConfig) -> Result<Files, ExperimentError> {
    let clock = cfg.sim_config().costs.cycles_per_ns;
    let to_cycles = |ns: f64| (ns * clock).round() as u64;
    let victim = match cfg.experiment {
        ExperimentKind::Keystroke => EventVictim::keystrokes(
            cfg.keystrokes,
            to_cycles(cfg.keystroke_gap_min_ns as f64),
            to_cycles(cfg.keystroke_gap_max_ns as f64),
            cfg.seed,
        ),
        _ => EventVictim::packets(cfg.packets, to_cycles(cfg.packet_interval_ns)),
    };
    let report = monitor_events(&victim, &monitor_config(cfg, &victim, cfg.xpt.enabled))?;
    let mut s = match cfg.experiment {
        ExperimentKind::Keystroke => String::from("Keystroke timing through a shared page\n\n"),
        _ => format!("Packet timing, one packet every {} ns\n\n", cfg.packet_interval_ns),
    };
    describe_monitor(&mut s, &report);
    let mut files = vec![
        ("events.csv".into(), report.event_csv()),
        ("probes.csv".into(), report.probe_csv()),
    ];
    if cfg.experiment == ExperimentKind::Keystroke {
        let mut split = String::from("xpt,mean_after_event,mean_otherwise,balanced_accuracy\n");
        let _ = writeln!(s, "\n{:<8} {:>16} {:>15} {:>9}", "xpt", "after event", "otherwise", "accuracy");
        for enabled in [true, false] {
            let r = if enabled == cfg.xpt.enabled {
                report.clone()
            } else {
                monitor_events(&victim, &monitor_config(cfg, &victim, enabled))?
            };
            let l = r.latency_split();
            let name = if enabled { "enabled" } else { "disabled" };
            let _ = writeln!(
                split,
                "{name},{:.1},{:.1},{:.3}",
                l.mean_after_event, l.mean_otherwise, l.balanced_accuracy
            );
            let _ = writeln!(
                s,
                "{name:<8} {:>16.1} {:>15.1} {:>9.3}",
                l.mean_after_event, l.mean_otherwise, l.balanced_accuracy
            );
        }
        files.push(("split.csv".into(), split));
    }
    files.push(("summary.txt".into(), s));
    Ok(files)
}

fn describe_monitor(s: &mut String, r: &MonitorReport) {
    let matches = r.matches();
    let lags: Vec<f64> = matches
        .iter()
        .filter_map(|m| m.lag())
        .map(|c| c as f64 / r.cycles_per_ns)
        .collect();
    let detected = lags.len();
    let _ = writeln!(s, "events           {}", r.events.len());
    let _ = writeln!(s, "detected         {detected} ({:.1}%)", 100.0 * r.detection_rate());
    let _ = writeln!(s, "false positives  {}", r.false_positives());
    let _ = writeln!(s, "probes           {}", r.probes.len());
    if detected > 0 {
        let mean = lags.iter().sum::<f64>() / detected as f64;
        let max = lags.iter().copied().fold(0.0, f64::max);
        let _ = writeln!(s, "lag mean / max   {mean:.1} / {max:.1} ns");
    }
    if !r.retrain_costs.is_empty() {
        let ns: Vec<f64> = r.retrain_costs.iter().map(|&c| c as f64 / r.cycles_per_ns).collect();
        let max = ns.iter().copied().fold(0.0, f64::max);
        let mean = ns.iter().sum::<f64>() / ns.len() as f64;
        let _ = writeln!(s, "retrain + probe  mean {mean:.1} ns, max {max:.1} ns");
    }
}
