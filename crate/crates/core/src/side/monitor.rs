//! Event-timing monitor. The victim's events shoot down the translation of a
//! page it shares with the attacker, which also clears the page's table entry.
//! The attacker keeps the page primed on lines 0..32 and polls a line in
//! 32..64; a normal miss marks an event and triggers a retrain.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::SimError;
use crate::ids::{ExecContext, VirtPage, LINES_PER_PAGE};
use crate::kernel::{CostModel, NoiseModel, Schedule, SimConfig, SimEvent, SimThread, Simulator};
use crate::mem::{LatencyClass, MachineConfig, MapOptions};
use crate::primitives::{irregular_order, probe_page, train_lines};

pub const MONITOR: ExecContext = ExecContext::new(0, 1, 1);
/// Identity of the process whose events are monitored.
pub const EVENT_SOURCE: ExecContext = ExecContext::new(2, 2, 1);

pub const PACKET_INTERVAL_NS: f64 = 26_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Keystroke,
    Network,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventVictim {
    pub kind: EventKind,
    pub shared_vpage: VirtPage,
    /// Event cycles relative to the start of monitoring, ascending.
    pub event_schedule: Vec<u64>,
}

impl EventVictim {
    pub fn new(kind: EventKind, event_schedule: Vec<u64>) -> Self {
        let mut event_schedule = event_schedule;
        event_schedule.sort_unstable();
        EventVictim {
            kind,
            shared_vpage: VirtPage(0x3000),
            event_schedule,
        }
    }

    /// `count` keystrokes separated by uniform gaps in `[min_gap, max_gap]`
    /// cycles, the first one a gap after the start.
    pub fn keystrokes(count: usize, min_gap: u64, max_gap: u64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(11);
        let mut t = 0;
        let schedule = (0..count)
            .map(|_| {
                t += rng.gen_range(min_gap..=max_gap);
                t
            })
            .collect();
        Self::new(EventKind::Keystroke, schedule)
    }

    /// `count` packets, one every `interval` cycles.
    pub fn packets(count: usize, interval: u64) -> Self {
        let schedule = (1..=count as u64).map(|k| k * interval).collect();
        Self::new(EventKind::Network, schedule)
    }

    fn event(&self) -> SimEvent {
        let (asid, vpage) = (EVENT_SOURCE.asid, self.shared_vpage);
        match self.kind {
            EventKind::Keystroke => SimEvent::KeystrokeIpi { asid, vpage },
            EventKind::Network => SimEvent::PacketArrival { asid, vpage },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorConfig {
    /// Maximum number of probes.
    pub poll_budget: u64,
    /// Stop polling once this many cycles have passed since monitoring
    /// started.
    pub until_cycle: Option<u64>,
    pub noise: NoiseModel,
    pub machine: MachineConfig,
    pub costs: CostModel,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            poll_budget: 100_000,
            until_cycle: None,
            noise: NoiseModel::default(),
            machine: MachineConfig::default(),
            costs: CostModel::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeSample {
    /// Issue cycle.
    pub cycle: u64,
    pub latency: u32,
    pub class: LatencyClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventMatch {
    pub event_cycle: u64,
    /// First detection at or after the event and before the next one.
    pub detect_cycle: Option<u64>,
    /// Further detections in the same window.
    pub extra: usize,
    /// Gap between the detecting probe and the probe before it.
    pub poll_period: Option<u64>,
}

impl EventMatch {
    pub fn lag(&self) -> Option<u64> {
        self.detect_cycle.map(|d| d - self.event_cycle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySplit {
    pub mean_after_event: f64,
    pub mean_otherwise: f64,
    /// Accuracy of "normal miss means event" averaged over both classes.
    pub balanced_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorReport {
    pub start_cycle: u64,
    /// Absolute event cycles.
    pub events: Vec<u64>,
    /// Absolute issue cycles of detecting probes.
    pub detections: Vec<u64>,
    pub probes: Vec<ProbeSample>,
    /// Cycles from the end of each detecting probe to the end of the probe
    /// after its retrain.
    pub retrain_costs: Vec<u64>,
    pub cycles_per_ns: f64,
}

pub const EVENT_CSV_HEADER: &str = "event_cycle,detect_cycle,lag_ns";
pub const PROBE_CSV_HEADER: &str = "cycle,latency,class";

impl MonitorReport {
    pub fn matches(&self) -> Vec<EventMatch> {
        let mut out = Vec::with_capacity(self.events.len());
        for (k, &event) in self.events.iter().enumerate() {
            let end = self.events.get(k + 1).copied().unwrap_or(u64::MAX);
            let lo = self.detections.partition_point(|&d| d < event);
            let hi = self.detections.partition_point(|&d| d < end);
            let detect_cycle = (lo < hi).then(|| self.detections[lo]);
            let poll_period = detect_cycle.and_then(|d| {
                let i = self.probes.partition_point(|p| p.cycle < d);
                (i > 0).then(|| d - self.probes[i - 1].cycle)
            });
            out.push(EventMatch {
                event_cycle: event,
                detect_cycle,
                extra: (hi - lo).saturating_sub(1),
                poll_period,
            });
        }
        out
    }

    pub fn detection_rate(&self) -> f64 {
        if self.events.is_empty() {
            return 1.0;
        }
        let hit = self.matches().iter().filter(|m| m.detect_cycle.is_some()).count();
        hit as f64 / self.events.len() as f64
    }

    /// Detections before the first event or beyond the first in a window.
    pub fn false_positives(&self) -> usize {
        let first = self.events.first().copied().unwrap_or(u64::MAX);
        let early = self.detections.partition_point(|&d| d < first);
        early + self.matches().iter().map(|m| m.extra).sum::<usize>()
    }

    fn after_event_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.probes.len()];
        for &e in &self.events {
            let i = self.probes.partition_point(|p| p.cycle < e);
            if i < mask.len() {
                mask[i] = true;
            }
        }
        mask
    }

    pub fn latency_split(&self) -> LatencySplit {
        let mask = self.after_event_mask();
        let (mut sum_a, mut n_a, mut sum_o, mut n_o) = (0.0, 0usize, 0.0, 0usize);
        let (mut tp, mut tn) = (0usize, 0usize);
        for (p, &after) in self.probes.iter().zip(&mask) {
            let flagged = p.class == LatencyClass::NormalMiss;
            if after {
                sum_a += f64::from(p.latency);
                n_a += 1;
                tp += usize::from(flagged);
            } else {
                sum_o += f64::from(p.latency);
                n_o += 1;
                tn += usize::from(!flagged);
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        LatencySplit {
            mean_after_event: if n_a == 0 { 0.0 } else { sum_a / n_a as f64 },
            mean_otherwise: if n_o == 0 { 0.0 } else { sum_o / n_o as f64 },
            balanced_accuracy: (ratio(tp, n_a) + ratio(tn, n_o)) / 2.0,
        }
    }

    pub fn event_csv(&self) -> String {
        let mut out = format!("{EVENT_CSV_HEADER}\n");
        for m in self.matches() {
            match m.detect_cycle {
                Some(d) => {
                    let lag_ns = (d - m.event_cycle) as f64 / self.cycles_per_ns;
                    let _ = writeln!(out, "{},{},{:.1}", m.event_cycle, d, lag_ns);
                }
                None => {
                    let _ = writeln!(out, "{},,", m.event_cycle);
                }
            }
        }
        out
    }

    pub fn probe_csv(&self) -> String {
        let mut out = format!("{PROBE_CSV_HEADER}\n");
        for p in &self.probes {
            let _ = writeln!(out, "{},{},{}", p.cycle, p.latency, p.class);
        }
        out
    }
}

#[derive(Default)]
struct Collected {
    detections: Vec<u64>,
    probes: Vec<ProbeSample>,
    retrain_costs: Vec<u64>,
}

pub fn monitor_events(victim: &EventVictim, config: &MonitorConfig) -> Result<MonitorReport, SimError> {
    let mut sim = Simulator::new(SimConfig {
        machine: config.machine.clone(),
        costs: config.costs.clone(),
        noise: config.noise.clone(),
    })?;
    let page = victim.shared_vpage;
    sim.mem_mut().map_page(
        EVENT_SOURCE,
        page,
        MapOptions::new().shared_with([MONITOR.asid]).locked(),
    )?;

    let lines = Rc::new(RefCell::new(Vec::new()));
    let setup = {
        let lines = Rc::clone(&lines);
        SimThread::new("monitor", MONITOR, move |cpu| async move {
            let mut order: Vec<u8> = (0..LINES_PER_PAGE / 2).collect();
            irregular_order(&mut *cpu.rng(), &mut order);
            train_lines(&cpu, page, &order).await?;
            *lines.borrow_mut() = order;
            Ok(())
        })
    };
    sim.run(vec![setup], Schedule::RoundRobinBySemaphore)?;
    let lines = lines.take();

    let start = sim.now();
    let events: Vec<u64> = victim.event_schedule.iter().map(|&c| start + c).collect();
    for &at in &events {
        sim.inject_event(at, victim.event())?;
    }

    let until = config.until_cycle.map_or(u64::MAX, |c| start.saturating_add(c));
    let budget = config.poll_budget;
    let collected = Rc::new(RefCell::new(Collected::default()));
    let monitor = {
        let collected = Rc::clone(&collected);
        SimThread::new("monitor", MONITOR, move |cpu| async move {
            let mut pending_retrain: Option<u64> = None;
            for _ in 0..budget {
                if cpu.now() >= until {
                    break;
                }
                let line = cpu.rng().gen_range(LINES_PER_PAGE / 2..LINES_PER_PAGE);
                cpu.flush_line(page.line_addr(line)).await?;
                let cycle = cpu.now();
                let probe = probe_page(&cpu, page, line).await?;
                let end = cpu.now();
                let mut c = collected.borrow_mut();
                c.probes.push(ProbeSample {
                    cycle,
                    latency: probe.latency,
                    class: probe.class,
                });
                if let Some(since) = pending_retrain.take() {
                    c.retrain_costs.push(end - since);
                }
                if probe.class == LatencyClass::NormalMiss {
                    c.detections.push(cycle);
                    drop(c);
                    train_lines(&cpu, page, &lines).await?;
                    pending_retrain = Some(end);
                }
            }
            Ok(())
        })
    };
    sim.run(vec![monitor], Schedule::RoundRobinBySemaphore)?;
    let c = collected.take();
    Ok(MonitorReport {
        start_cycle: start,
        events,
        detections: c.detections,
        probes: c.probes,
        retrain_costs: c.retrain_costs,
        cycles_per_ns: sim.clock().cycles_per_ns(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(cycle: u64, class: LatencyClass) -> ProbeSample {
        ProbeSample {
            cycle,
            latency: if class == LatencyClass::NormalMiss { 380 } else { 225 },
            class,
        }
    }

    #[test]
    fn matching_and_split() {
        use LatencyClass::*;
        let report = MonitorReport {
            start_cycle: 0,
            events: vec![100, 500],
            detections: vec![150, 160, 900],
            probes: vec![
                sample(50, OptimizedMiss),
                sample(150, NormalMiss),
                sample(160, NormalMiss),
                sample(400, OptimizedMiss),
                sample(900, NormalMiss),
            ],
            retrain_costs: vec![],
            cycles_per_ns: 1.0,
        };
        let m = report.matches();
        assert_eq!(m[0].detect_cycle, Some(150));
        assert_eq!(m[0].extra, 1);
        assert_eq!(m[0].poll_period, Some(100));
        assert_eq!(m[1].lag(), Some(400));
        assert_eq!(report.false_positives(), 1);
        assert_eq!(report.detection_rate(), 1.0);
        let split = report.latency_split();
        assert_eq!(split.mean_after_event, 380.0);
        assert!((split.mean_otherwise - (225.0 + 380.0 + 225.0) / 3.0).abs() < 1e-9);
        assert_eq!(report.event_csv(), "event_cycle,detect_cycle,lag_ns\n100,150,50.0\n500,900,400.0\n");
    }

    #[test]
    fn schedules() {
        let k = EventVictim::keystrokes(5, 100, 200, 1);
        assert_eq!(k.event_schedule.len(), 5);
        assert!(k.event_schedule.windows(2).all(|w| (100..=200).contains(&(w[1] - w[0]))));
        assert_eq!(EventVictim::packets(3, 10).event_schedule, [10, 20, 30]);
    }
}
