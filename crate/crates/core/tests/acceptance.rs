//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any FAIL.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::reference_xpt::{first_divergence, random_op};
use xpt_sim::covert::{
    run_channel, ChannelConfig, ChannelVariant, MessagePattern, CALIBRATED_EVICT_NOISE, CALIBRATED_FLUSH_NOISE,
};
use xpt_sim::experiments::{boundary_scenarios, entry_sweep, index_scenarios, invalidate_scenarios, trigger_sweep};
use xpt_sim::kernel::{NoiseModel, SimConfig, DEFAULT_CYCLES_PER_NS};
use xpt_sim::mem::{LatencyClass, LatencyModel};
use xpt_sim::side::{
    attack_ml_rsa, attack_sqm_rsa, monitor_events, AttackConfig, EventVictim, MlRsaVictim, MonitorConfig,
    MonitorReport, SqmRsaVictim,
};
use xpt_sim::side::monitor::PACKET_INTERVAL_NS;
use xpt_sim::xpt::XptConfig;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    check(took < limit, format!("took {took:.2?}, limit {limit:?}"))
}

fn trigger_threshold() -> Outcome {
    let start = Instant::now();
    let points = trigger_sweep(&SimConfig::with_seed(1), 64, 10).map_err(|e| e.to_string())?;
    check(points.len() == 64 * 10 * 2, format!("{} points", points.len()))?;
    for p in &points {
        let want = if p.misses >= 32 {
            LatencyClass::OptimizedMiss
        } else {
            LatencyClass::NormalMiss
        };
        check(p.class == want, format!("{} misses, cross={}, trial {}: {}", p.misses, p.cross_core, p.trial, p.class))?;
    }
    within(start, Duration::from_secs(1))?;
    Ok("switch at 32 misses on both core pairings, 10 seeds".into())
}

fn capacity_lru() -> Outcome {
    let start = Instant::now();
    let points = entry_sweep(&SimConfig::with_seed(1), 257).map_err(|e| e.to_string())?;
    for p in &points {
        let want = if p.probed == 1 && p.pages == 257 {
            LatencyClass::NormalMiss
        } else {
            LatencyClass::OptimizedMiss
        };
        check(p.class == want, format!("N={} page {}: {}", p.pages, p.probed, p.class))?;
    }
    check(
        points.iter().any(|p| p.pages == 257 && p.probed == 2),
        "no page-2 probe at N=257",
    )?;
    check(points.iter().filter(|p| p.probed == 1).count() == 257, "missing page-1 probes")?;
    within(start, Duration::from_secs(5))?;
    Ok("256 entries; N=257 evicts page 1 only".into())
}

fn indexing() -> Outcome {
    let rows = index_scenarios(&SimConfig::with_seed(1)).map_err(|e| e.to_string())?;
    let got: Vec<(&str, bool)> = rows.iter().map(|r| (r.scenario, r.triggered())).collect();
    let want = [("physical", true), ("virtual", false), ("ip", false)];
    check(got == want, format!("{got:?}"))?;
    Ok("physical triggers; virtual and ip do not".into())
}

fn page_boundary() -> Outcome {
    let rows = boundary_scenarios(&SimConfig::with_seed(1)).map_err(|e| e.to_string())?;
    check(rows.len() == 3, format!("{} rows", rows.len()))?;
    for r in &rows {
        check(r.trained.class == LatencyClass::OptimizedMiss, format!("{}: trained page not primed", r.size.label()))?;
        check(r.next.class == LatencyClass::NormalMiss, format!("{}: next page primed", r.size.label()))?;
    }
    Ok("4K, 2M, 1G: next 4 KiB page never primed".into())
}

fn invalidation() -> Outcome {
    let rows = invalidate_scenarios(&SimConfig::with_seed(1)).map_err(|e| e.to_string())?;
    let got: Vec<(&str, &str, bool)> = rows.iter().map(|r| (r.scenario, r.page, r.triggered())).collect();
    let want = [
        ("1", "A", true),
        ("2", "A", true),
        ("2", "B", true),
        ("3", "A", true),
        ("4", "A", false),
        ("5", "A", false),
        ("5", "B", true),
        ("6", "A", false),
    ];
    check(got == want, format!("{got:?}"))?;
    Ok("8/8 rows, scenario 5 split A=no B=yes".into())
}

fn rsa_recovery() -> Outcome {
    let start = Instant::now();
    let quiet = AttackConfig::default().with_noise(NoiseModel::with_seed(1));
    let ml = attack_ml_rsa(&MlRsaVictim::from_value(0x93, 8), &quiet).map_err(|e| e.to_string())?;
    let sqm = attack_sqm_rsa(&SqmRsaVictim::from_value(0xf0, 8), &quiet).map_err(|e| e.to_string())?;
    check(ml.to_u64() == 0x93 && ml.confidence == 1.0, format!("ml {:#x} conf {}", ml.to_u64(), ml.confidence))?;
    check(sqm.to_u64() == 0xf0 && sqm.confidence == 1.0, format!("sqm {:#x} conf {}", sqm.to_u64(), sqm.confidence))?;
    let (mut ml_ok, mut sqm_ok) = (0, 0);
    for seed in 0..20 {
        let noisy = AttackConfig::default().with_noise(NoiseModel {
            seed,
            spurious_walk_prob: 0.2,
            jitter: 10,
        });
        let ml = attack_ml_rsa(&MlRsaVictim::from_value(0x93, 8), &noisy).map_err(|e| e.to_string())?;
        let sqm = attack_sqm_rsa(&SqmRsaVictim::from_value(0xf0, 8), &noisy).map_err(|e| e.to_string())?;
        ml_ok += u32::from(ml.to_u64() == 0x93 && ml.confidence >= 0.8);
        sqm_ok += u32::from(sqm.to_u64() == 0xf0 && sqm.confidence >= 0.8);
    }
    check(ml_ok >= 19 && sqm_ok >= 19, format!("noisy exact: ml {ml_ok}/20, sqm {sqm_ok}/20"))?;
    within(start, Duration::from_secs(10))?;
    Ok(format!("exact at zero noise; at p=0.2 ml {ml_ok}/20, sqm {sqm_ok}/20"))
}

fn keystroke_monitor(enabled: bool) -> Result<MonitorReport, String> {
    let ns = |v: f64| (v * DEFAULT_CYCLES_PER_NS).round() as u64;
    let victim = EventVictim::keystrokes(10, ns(1_000_000.0), ns(5_000_000.0), 1);
    let mut cfg = MonitorConfig {
        poll_budget: u64::MAX,
        until_cycle: Some(victim.event_schedule.last().unwrap() + 200_000),
        noise: NoiseModel::with_seed(1),
        ..MonitorConfig::default()
    };
    cfg.machine.xpt = XptConfig {
        enabled,
        ..XptConfig::default()
    };
    monitor_events(&victim, &cfg).map_err(|e| e.to_string())
}

fn keystroke_null() -> Outcome {
    let centers = LatencyModel::default();
    let on = keystroke_monitor(true)?.latency_split();
    let off = keystroke_monitor(false)?.latency_split();
    let near = |mean: f64, center: u32| (mean - f64::from(center)).abs() <= 20.0;
    check(near(on.mean_after_event, centers.normal_miss), format!("after-event mean {:.1}", on.mean_after_event))?;
    check(near(on.mean_otherwise, centers.optimized_miss), format!("otherwise mean {:.1}", on.mean_otherwise))?;
    check(on.mean_after_event - on.mean_otherwise > 100.0, "separation <= 100 cycles")?;
    check(
        (off.mean_after_event - off.mean_otherwise).abs() < 15.0,
        format!("disabled means {:.1} vs {:.1}", off.mean_after_event, off.mean_otherwise),
    )?;
    check((off.balanced_accuracy - 0.5).abs() <= 0.05, format!("disabled accuracy {:.3}", off.balanced_accuracy))?;
    Ok(format!(
        "enabled {:.1}/{:.1}, disabled {:.1}/{:.1} (acc {:.2})",
        on.mean_after_event, on.mean_otherwise, off.mean_after_event, off.mean_otherwise, off.balanced_accuracy
    ))
}

fn network_resolution() -> Outcome {
    let interval = (PACKET_INTERVAL_NS * DEFAULT_CYCLES_PER_NS).round() as u64;
    let victim = EventVictim::packets(1_000, interval);
    let cfg = MonitorConfig {
        poll_budget: u64::MAX,
        until_cycle: Some(victim.event_schedule.last().unwrap() + 200_000),
        noise: NoiseModel::with_seed(1),
        ..MonitorConfig::default()
    };
    let report = monitor_events(&victim, &cfg).map_err(|e| e.to_string())?;
    let worst = report.retrain_costs.iter().max().copied().unwrap_or(u64::MAX) as f64 / report.cycles_per_ns;
    check(worst <= 3840.0, format!("retrain+probe {worst:.1} ns"))?;
    check(report.detection_rate() == 1.0, format!("detection rate {}", report.detection_rate()))?;
    check(report.false_positives() == 0, format!("{} false positives", report.false_positives()))?;
    for m in report.matches() {
        let (lag, period) = (m.lag().unwrap(), m.poll_period.unwrap());
        check(lag <= period, format!("event at {}: lag {lag} > poll period {period}", m.event_cycle))?;
    }
    Ok(format!("1000/1000 packets, worst retrain+probe {worst:.0} ns"))
}

fn channel(variant: ChannelVariant, pattern: MessagePattern, p: f64) -> Result<xpt_sim::covert::ChannelStats, String> {
    let msg = pattern.generate(10_000, 1);
    let cfg = ChannelConfig::new(variant).with_noise(NoiseModel {
        seed: 1,
        spurious_walk_prob: p,
        jitter: 10,
    });
    run_channel(&msg, &cfg).map_err(|e| e.to_string())
}

const MIB: f64 = 1024.0 * 1024.0;

fn covert_channels() -> Outcome {
    use ChannelVariant::{EvictionBased, FlushBased};
    use MessagePattern::{Alternating, Ones};
    let flush_ones = channel(FlushBased, Ones, 0.0)?;
    let evict_ones = channel(EvictionBased, Ones, 0.0)?;
    check(flush_ones.errors == 0 && evict_ones.errors == 0, "zero-noise all-ones errors")?;
    let (tf, te) = (flush_ones.throughput_bytes_per_sec, evict_ones.throughput_bytes_per_sec);
    check((tf / te - 1.0).abs() < 0.005, format!("all-ones throughput {tf:.0} vs {te:.0}"))?;
    let cal_ones = channel(FlushBased, Ones, CALIBRATED_FLUSH_NOISE)?;
    for t in [tf, te, cal_ones.throughput_bytes_per_sec] {
        check((t / MIB / 1.7 - 1.0).abs() <= 0.05, format!("all-ones {:.3} MiB/s", t / MIB))?;
    }
    let flush_alt = channel(FlushBased, Alternating, CALIBRATED_FLUSH_NOISE)?;
    let evict_alt = channel(EvictionBased, Alternating, CALIBRATED_EVICT_NOISE)?;
    let ratio = cal_ones.throughput_bytes_per_sec / flush_alt.throughput_bytes_per_sec;
    check(ratio >= 30.0, format!("flush ones:alternating {ratio:.1}"))?;
    let rel = evict_alt.throughput_bytes_per_sec / flush_alt.throughput_bytes_per_sec;
    check(rel >= 2.0, format!("evict/flush alternating {rel:.2}"))?;
    check(
        (evict_alt.error_rate - 0.08).abs() <= 0.02,
        format!("eviction error rate {:.4}", evict_alt.error_rate),
    )?;
    Ok(format!(
        "all-ones {:.3} MiB/s, flush ratio {ratio:.1}:1, evict/flush alt {rel:.2}x, evict err {:.2}%",
        tf / MIB,
        100.0 * evict_alt.error_rate
    ))
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let cfg = XptConfig::default();
    for seq in 0..1_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seq);
        let ops: Vec<_> = (0..1_000).map(|_| random_op(&mut rng, 300)).collect();
        if let Some((i, why)) = first_divergence(&cfg, &ops) {
            return Err(format!("sequence {seq}, op {i}: {why}"));
        }
    }
    within(start, Duration::from_secs(30))?;
    Ok("1000 x 1000 ops, no divergence".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("trigger threshold", trigger_threshold),
        ("capacity and LRU", capacity_lru),
        ("indexing", indexing),
        ("page boundary", page_boundary),
        ("invalidation scenarios", invalidation),
        ("RSA key recovery", rsa_recovery),
        ("keystroke null result", keystroke_null),
        ("network resolution", network_resolution),
        ("covert channels", covert_channels),
        ("oracle equivalence", oracle_equivalence),
    ];
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name:<24} PASS  {detail} [{took:.2?}]", n + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name:<24} FAIL  {detail} [{took:.2?}]", n + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
