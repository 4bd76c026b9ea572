//! Reverse-engineering microbenchmarks. Every scenario builds a fresh
//! simulator and drives it with short single-thread programs.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::future::Future;
use std::rc::Rc;

use rand::Rng;

use crate::error::SimError;
use crate::ids::{ExecContext, VirtPage, LINES_PER_PAGE};
use crate::kernel::{Cpu, Schedule, SimConfig, SimThread, Simulator};
use crate::mem::{LatencyClass, MapOptions, PageSize, TlbScope};
use crate::primitives::{pick_training_lines, probe_page, train_lines, train_page, ProbeResult};

const P1: ExecContext = ExecContext::new(0, 1, 1);
const P2: ExecContext = ExecContext::new(1, 2, 1);
const T1: ExecContext = ExecContext::new(0, 1, 1);
const T2: ExecContext = ExecContext::new(1, 1, 2);

const PAGE_A: VirtPage = VirtPage(0x100);
const PAGE_B: VirtPage = VirtPage(0x200);
const PAGE_C: VirtPage = VirtPage(0x300);

/// Runs `program` as the only thread and returns its value.
pub(crate) fn run_as<T, F, Fut>(sim: &mut Simulator, ctx: ExecContext, program: F) -> Result<T, SimError>
where
    T: 'static,
    F: FnOnce(Cpu) -> Fut + 'static,
    Fut: Future<Output = Result<T, SimError>> + 'static,
{
    let slot = Rc::new(RefCell::new(None));
    let out = Rc::clone(&slot);
    let thread = SimThread::new("bench", ctx, move |cpu| async move {
        let value = program(cpu).await?;
        *out.borrow_mut() = Some(value);
        Ok(())
    });
    sim.run(vec![thread], Schedule::RoundRobinBySemaphore)?;
    let value = slot.borrow_mut().take();
    Ok(value.expect("program ran to completion"))
}

/// Flushes a random line of `vpage`, then probes it.
pub(crate) async fn probe_random_line(cpu: &Cpu, vpage: VirtPage) -> Result<ProbeResult, SimError> {
    let line = cpu.rng().gen_range(0..LINES_PER_PAGE);
    cpu.flush_line(vpage.line_addr(line)).await?;
    probe_page(cpu, vpage, line).await
}

fn train(sim: &mut Simulator, ctx: ExecContext, vpage: VirtPage) -> Result<(), SimError> {
    run_as(sim, ctx, move |cpu| async move { train_page(&cpu, vpage).await.map(drop) })
}

fn probe(sim: &mut Simulator, ctx: ExecContext, vpage: VirtPage) -> Result<ProbeResult, SimError> {
    run_as(sim, ctx, move |cpu| async move { probe_random_line(&cpu, vpage).await })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriggerPoint {
    pub misses: u32,
    pub cross_core: bool,
    pub trial: u32,
    pub latency: u32,
    pub class: LatencyClass,
}

pub const TRIGGER_CSV_HEADER: &str = "misses,probe_core,trial,latency,class";

/// Probe latency after `n` training misses for `n` in `1..=max_misses`,
/// probing from the training core and from another core.
pub fn trigger_sweep(base: &SimConfig, max_misses: u32, trials: u32) -> Result<Vec<TriggerPoint>, SimError> {
    if !(1..=u32::from(LINES_PER_PAGE)).contains(&max_misses) {
        return Err(crate::error::ConfigError::invalid(
            "max_misses",
            format!("must be in 1..={LINES_PER_PAGE}"),
        )
        .into());
    }
    let trainer = ExecContext::new(0, 1, 1);
    let remote = ExecContext::new(7, 1, 2);
    let page = VirtPage(0x400);
    let mut out = Vec::new();
    for trial in 0..trials {
        let mut config = base.clone();
        config.noise.seed = base.noise.seed.wrapping_add(u64::from(trial));
        let mut template = Simulator::new(config)?;
        template.mem_mut().map_page(trainer, page, MapOptions::new().locked())?;
        for misses in 1..=max_misses {
            for cross_core in [false, true] {
                let mut sim = template.clone();
                run_as(&mut sim, trainer, move |cpu| async move {
                    let lines = pick_training_lines(&mut *cpu.rng(), misses as usize);
                    train_lines(&cpu, page, &lines).await
                })?;
                let prober = if cross_core { remote } else { trainer };
                let p = probe(&mut sim, prober, page)?;
                out.push(TriggerPoint {
                    misses,
                    cross_core,
                    trial,
                    latency: p.latency,
                    class: p.class,
                });
            }
        }
    }
    Ok(out)
}

pub fn trigger_csv(points: &[TriggerPoint]) -> String {
    let mut out = format!("{TRIGGER_CSV_HEADER}\n");
    for p in points {
        let core = if p.cross_core { "cross" } else { "same" };
        let _ = writeln!(out, "{},{},{},{},{}", p.misses, core, p.trial, p.latency, p.class);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryPoint {
    /// Number of pages primed, in order.
    pub pages: u32,
    /// 1-based index of the probed page.
    pub probed: u32,
    pub latency: u32,
    pub class: LatencyClass,
}

pub const ENTRY_CSV_HEADER: &str = "pages,probed_page,latency,class";

/// Primes pages 1..=N in order and probes page 1 (and page 2) after each N.
/// Probes run on a copy of the simulator so they never disturb recency.
pub fn entry_sweep(base: &SimConfig, max_pages: u32) -> Result<Vec<EntryPoint>, SimError> {
    let ctx = ExecContext::new(0, 1, 1);
    let first = VirtPage(0x10_000);
    let mut sim = Simulator::new(base.clone())?;
    for k in 0..u64::from(max_pages) {
        sim.mem_mut().map_page(ctx, first.offset(k), MapOptions::new().locked())?;
    }
    let mut out = Vec::new();
    for n in 1..=max_pages {
        train(&mut sim, ctx, first.offset(u64::from(n - 1)))?;
        for probed in [1, 2] {
            if probed > n {
                continue;
            }
            let mut copy = sim.clone();
            let p = probe(&mut copy, ctx, first.offset(u64::from(probed - 1)))?;
            out.push(EntryPoint {
                pages: n,
                probed,
                latency: p.latency,
                class: p.class,
            });
        }
    }
    Ok(out)
}

pub fn entry_csv(points: &[EntryPoint]) -> String {
    let mut out = format!("{ENTRY_CSV_HEADER}\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{}", p.pages, p.probed, p.latency, p.class);
    }
    out
}

/// One observed probe of a scenario table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioRow {
    pub scenario: &'static str,
    pub setup: &'static str,
    pub page: &'static str,
    pub class: LatencyClass,
    pub latency: u32,
    pub expected_trigger: bool,
}

impl ScenarioRow {
    pub fn triggered(&self) -> bool {
        self.class == LatencyClass::OptimizedMiss
    }

    pub fn matches(&self) -> bool {
        self.triggered() == self.expected_trigger
    }
}

pub const SCENARIO_CSV_HEADER: &str = "scenario,setup,page,class,latency,triggered,expected";

pub fn scenario_csv(rows: &[ScenarioRow]) -> String {
    let mut out = format!("{SCENARIO_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.scenario,
            r.setup,
            r.page,
            r.class,
            r.latency,
            u8::from(r.triggered()),
            u8::from(r.expected_trigger)
        );
    }
    out
}

fn row(
    scenario: &'static str,
    setup: &'static str,
    page: &'static str,
    probe: ProbeResult,
    expected_trigger: bool,
) -> ScenarioRow {
    ScenarioRow {
        scenario,
        setup,
        page,
        class: probe.class,
        latency: probe.latency,
        expected_trigger,
    }
}

/// Which address the prefetcher keys on: the physical page.
pub fn index_scenarios(base: &SimConfig) -> Result<Vec<ScenarioRow>, SimError> {
    let mut rows = Vec::new();

    let mut sim = Simulator::new(base.clone())?;
    sim.mem_mut().map_page(P1, PAGE_A, MapOptions::new().shared_with([P2.asid]))?;
    train(&mut sim, P1, PAGE_A)?;
    let p = probe(&mut sim, P2, PAGE_A)?;
    rows.push(row("physical", "p1 trains shared page; p2 probes it", "A", p, true));

    let mut sim = Simulator::new(base.clone())?;
    sim.mem_mut().map_page(P1, PAGE_A, MapOptions::new())?;
    sim.mem_mut().map_page(P2, PAGE_A, MapOptions::new())?;
    train(&mut sim, P1, PAGE_A)?;
    let p = probe(&mut sim, P2, PAGE_A)?;
    rows.push(row("virtual", "p1 trains A; p2 probes its own A at the same vaddr", "A", p, false));

    let mut sim = Simulator::new(base.clone())?;
    sim.mem_mut().map_page(P1, PAGE_A, MapOptions::new())?;
    sim.mem_mut().map_page(P1, PAGE_B, MapOptions::new())?;
    train(&mut sim, P1, PAGE_A)?;
    let p = probe(&mut sim, P1, PAGE_B)?;
    rows.push(row("ip", "p1 trains A; the same probe code loads from B", "B", p, false));

    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryRow {
    pub size: PageSize,
    /// Probe of the trained page itself.
    pub trained: ProbeResult,
    /// Probe of the following 4 KiB page inside the same mapping (or the
    /// adjacent mapping for 4 KiB pages).
    pub next: ProbeResult,
}

pub const BOUNDARY_CSV_HEADER: &str = "mapping,trained_class,next_class,next_triggered";

pub fn boundary_csv(rows: &[BoundaryRow]) -> String {
    let mut out = format!("{BOUNDARY_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.size.label(),
            r.trained.class,
            r.next.class,
            u8::from(r.next.class == LatencyClass::OptimizedMiss)
        );
    }
    out
}

/// Trains the first 4 KiB page of a mapping and probes it and its successor.
pub fn boundary_scenarios(base: &SimConfig) -> Result<Vec<BoundaryRow>, SimError> {
    let ctx = ExecContext::new(0, 1, 1);
    let mut rows = Vec::new();
    for size in [PageSize::Size4K, PageSize::Size2M, PageSize::Size1G] {
        let mut sim = Simulator::new(base.clone())?;
        let page = VirtPage(size.pages().max(512) * 4);
        sim.mem_mut().map_page(ctx, page, MapOptions::new().size(size).locked())?;
        if size == PageSize::Size4K {
            sim.mem_mut().map_page(ctx, page.offset(1), MapOptions::new().locked())?;
        }
        train(&mut sim, ctx, page)?;
        let trained = probe(&mut sim.clone(), ctx, page)?;
        let next = probe(&mut sim, ctx, page.offset(1))?;
        rows.push(BoundaryRow { size, trained, next });
    }
    Ok(rows)
}

/// Table-replacement and invalidation behaviour across processes and
/// threads. P1/P2 are processes; T1/T2 are threads of one process.
pub fn invalidate_scenarios(base: &SimConfig) -> Result<Vec<ScenarioRow>, SimError> {
    let fresh = || Simulator::new(base.clone());
    let mut rows = Vec::new();

    let mut sim = fresh()?;
    sim.mem_mut().map_page(P1, PAGE_A, MapOptions::new().shared_with([P2.asid]))?;
    train(&mut sim, P1, PAGE_A)?;
    train(&mut sim, P2, PAGE_A)?;
    let p = probe(&mut sim, P1, PAGE_A)?;
    rows.push(row("1", "p1 trains A; p2 trains A", "A", p, true));

    let mut sim = fresh()?;
    sim.mem_mut().map_page(P1, PAGE_A, MapOptions::new())?;
    sim.mem_mut().map_page(P2, PAGE_B, MapOptions::new())?;
    train(&mut sim, P1, PAGE_A)?;
    train(&mut sim, P2, PAGE_B)?;
    let a = probe(&mut sim, P1, PAGE_A)?;
    let b = probe(&mut sim, P2, PAGE_B)?;
    rows.push(row("2", "p1 trains A; p2 trains B", "A", a, true));
    rows.push(row("2", "p1 trains A; p2 trains B", "B", b, true));

    let mut sim = fresh()?;
    sim.mem_mut().map_page(T1, PAGE_A, MapOptions::new())?;
    train(&mut sim, T1, PAGE_A)?;
    train(&mut sim, T2, PAGE_A)?;
    let p = probe(&mut sim, T1, PAGE_A)?;
    rows.push(row("3", "t1 trains A; t2 trains A", "A", p, true));

    let mut sim = fresh()?;
    sim.mem_mut().map_page(T1, PAGE_A, MapOptions::new())?;
    sim.mem_mut().map_page(T2, PAGE_B, MapOptions::new())?;
    train(&mut sim, T1, PAGE_A)?;
    train(&mut sim, T2, PAGE_B)?;
    let p = probe(&mut sim, T1, PAGE_A)?;
    rows.push(row("4", "t1 trains A; t2 trains B", "A", p, false));

    let mut sim = fresh()?;
    for page in [PAGE_A, PAGE_B, PAGE_C] {
        sim.mem_mut().map_page(T1, page, MapOptions::new())?;
    }
    train(&mut sim, T1, PAGE_A)?;
    train(&mut sim, T1, PAGE_B)?;
    train(&mut sim, T2, PAGE_C)?;
    let mut copy = sim.clone();
    let a = probe(&mut copy, T1, PAGE_A)?;
    let b = probe(&mut sim, T1, PAGE_B)?;
    rows.push(row("5", "t1 trains A then B; t2 trains C", "A", a, false));
    rows.push(row("5", "t1 trains A then B; t2 trains C", "B", b, true));

    let mut sim = fresh()?;
    sim.mem_mut().map_page(P1, PAGE_A, MapOptions::new().shared_with([P2.asid]))?;
    train(&mut sim, P1, PAGE_A)?;
    run_as(&mut sim, P2, |cpu| async move {
        cpu.flush_tlb(TlbScope::Page(P2.asid, PAGE_A)).await
    })?;
    let p = probe(&mut sim, P1, PAGE_A)?;
    rows.push(row("6", "p1 trains A; p2 flushes its TLB entry for A", "A", p, false));

    Ok(rows)
}
