//! Deterministic execution kernel.
//!
//! Simulated threads are `async` programs that receive a [`Cpu`] handle.
//! Each operation on the handle is one step: the thread suspends, the kernel
//! executes the step against the memory system, charges its cost to the
//! clock and records it in the trace. Runnable threads are stepped
//! round-robin. Semaphores hand ownership to the head of their FIFO queue on
//! release, which is how attacker and victim phases strictly alternate.
//!
//! Injected events fire at the first scheduling point whose clock is at or
//! past their cycle.

mod cpu;
mod event;
mod trace;

pub use cpu::Cpu;
pub use event::{format_script, parse_script, ScheduledEvent, ScriptError, SimEvent};
pub use trace::{EventTrace, TraceKind, TraceRecord, KERNEL_THREAD, TRACE_CSV_HEADER};

use std::cell::RefCell;
use std::collections::{BTreeMap, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ConfigError, SimError};
use crate::ids::{ExecContext, PhysPage, OS_TID};
use crate::mem::{MachineConfig, MemorySystem, TlbScope};
use cpu::{Mailbox, Request, Response};

pub const DEFAULT_CYCLES_PER_NS: f64 = 10.0 / 3.0;

/// Clock charges for non-latency work.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    /// Added to every step except semaphore operations.
    pub step_overhead_cycles: u64,
    /// Cost of a TLB shootdown issued by a thread.
    pub tlb_flush_cycles: u64,
    /// Fraction of a training load's latency hidden by memory-level
    /// parallelism, in `[0, 1)`.
    pub training_overlap: f64,
    pub cycles_per_ns: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            step_overhead_cycles: 5,
            tlb_flush_cycles: 28_000,
            training_overlap: 0.22,
            cycles_per_ns: DEFAULT_CYCLES_PER_NS,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..1.0).contains(&self.training_overlap) {
            return Err(ConfigError::invalid("costs.training_overlap", "must be in [0, 1)"));
        }
        if !(self.cycles_per_ns.is_finite() && self.cycles_per_ns > 0.0) {
            return Err(ConfigError::invalid("costs.cycles_per_ns", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub seed: u64,
    /// Chance, each time the noise-target thread acquires a semaphore, that
    /// the OS walks a fresh page in that thread's address space.
    pub spurious_walk_prob: f64,
    /// Uniform latency jitter amplitude in cycles.
    pub jitter: u32,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            seed: 0,
            spurious_walk_prob: 0.0,
            jitter: 10,
        }
    }
}

impl NoiseModel {
    pub fn with_seed(seed: u64) -> Self {
        NoiseModel {
            seed,
            ..NoiseModel::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.spurious_walk_prob) {
            return Err(ConfigError::invalid(
                "noise.spurious_walk_prob",
                "must be in [0, 1]",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimConfig {
    pub machine: MachineConfig,
    pub costs: CostModel,
    pub noise: NoiseModel,
}

impl SimConfig {
    pub fn with_seed(seed: u64) -> Self {
        SimConfig {
            noise: NoiseModel::with_seed(seed),
            ..SimConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimClock {
    now_cycles: u64,
    cycles_per_ns: f64,
}

impl SimClock {
    pub fn now(&self) -> u64 {
        self.now_cycles
    }

    pub fn cycles_per_ns(&self) -> f64 {
        self.cycles_per_ns
    }

    pub fn to_ns(&self, cycles: u64) -> f64 {
        cycles as f64 / self.cycles_per_ns
    }

    pub fn from_ns(&self, ns: f64) -> u64 {
        (ns * self.cycles_per_ns).round() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SemId(usize);

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SemBarrier {
    pub owner: Option<usize>,
    pub wait_queue: VecDeque<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreadState {
    Runnable,
    BlockedOnSem(SemId),
    Done,
}

type Program = Pin<Box<dyn Future<Output = Result<(), SimError>>>>;

pub struct SimThread {
    name: String,
    ctx: ExecContext,
    noise_target: bool,
    spawn: Box<dyn FnOnce(Cpu) -> Program>,
}

impl SimThread {
    pub fn new<F, Fut>(name: impl Into<String>, ctx: ExecContext, program: F) -> Self
    where
        F: FnOnce(Cpu) -> Fut + 'static,
        Fut: Future<Output = Result<(), SimError>> + 'static,
    {
        SimThread {
            name: name.into(),
            ctx,
            noise_target: false,
            spawn: Box::new(move |cpu| Box::pin(program(cpu))),
        }
    }

    /// Marks this thread as the one exposed to spurious OS page walks.
    pub fn noise_target(mut self) -> Self {
        self.noise_target = true;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn ctx(&self) -> ExecContext {
        self.ctx
    }
}

pub enum Schedule {
    RoundRobinBySemaphore,
    /// Round-robin plus the given events, injected before the run starts.
    Scripted(Vec<ScheduledEvent>),
}

struct Live {
    name: String,
    trace_id: u32,
    ctx: ExecContext,
    noise_target: bool,
    state: ThreadState,
    program: Program,
    mailbox: Rc<RefCell<Mailbox>>,
}

/// Frames cycled through by spurious walks.
const NOISE_FRAMES: usize = 512;

#[derive(Debug, Clone)]
pub struct Simulator {
    config: SimConfig,
    mem: MemorySystem,
    clock: SimClock,
    sems: Vec<SemBarrier>,
    pending: BTreeMap<(u64, u64), SimEvent>,
    event_seq: u64,
    noise_rng: ChaCha8Rng,
    noise_frames: Vec<PhysPage>,
    next_noise_frame: usize,
    next_stream: u64,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self, ConfigError> {
        config.costs.validate()?;
        config.noise.validate()?;
        let mem = MemorySystem::new(config.machine.clone(), config.noise.jitter, config.noise.seed)?;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(config.noise.seed);
        noise_rng.set_stream(2);
        Ok(Simulator {
            clock: SimClock {
                now_cycles: 0,
                cycles_per_ns: config.costs.cycles_per_ns,
            },
            mem,
            sems: Vec::new(),
            pending: BTreeMap::new(),
            event_seq: 0,
            noise_rng,
            noise_frames: Vec::new(),
            next_noise_frame: 0,
            next_stream: 16,
            config,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn mem(&self) -> &MemorySystem {
        &self.mem
    }

    pub fn mem_mut(&mut self) -> &mut MemorySystem {
        &mut self.mem
    }

    pub fn clock(&self) -> SimClock {
        self.clock
    }

    pub fn now(&self) -> u64 {
        self.clock.now_cycles
    }

    pub fn new_semaphore(&mut self) -> SemId {
        self.sems.push(SemBarrier::default());
        SemId(self.sems.len() - 1)
    }

    pub fn semaphore(&self, sem: SemId) -> &SemBarrier {
        &self.sems[sem.0]
    }

    pub fn pending_events(&self) -> usize {
        self.pending.len()
    }

    pub fn inject_event(&mut self, at_cycle: u64, event: SimEvent) -> Result<(), SimError> {
        if at_cycle < self.clock.now_cycles {
            return Err(SimError::EventInPast {
                at: at_cycle,
                now: self.clock.now_cycles,
            });
        }
        self.event_seq += 1;
        self.pending.insert((at_cycle, self.event_seq), event);
        Ok(())
    }

    /// Runs the threads to completion. Semaphores start each run free.
    pub fn run(&mut self, threads: Vec<SimThread>, schedule: Schedule) -> Result<EventTrace, SimError> {
        if let Schedule::Scripted(events) = schedule {
            for e in events {
                self.inject_event(e.at_cycle, e.event)?;
            }
        }
        for sem in &mut self.sems {
            *sem = SemBarrier::default();
        }
        let mut trace = EventTrace::new();
        let mut live: Vec<Live> = threads
            .into_iter()
            .map(|t| {
                let mailbox = Rc::new(RefCell::new(Mailbox {
                    now: self.clock.now_cycles,
                    ..Mailbox::default()
                }));
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.noise.seed);
                rng.set_stream(self.next_stream);
                self.next_stream += 1;
                let cpu = Cpu::new(t.ctx, Rc::clone(&mailbox), rng);
                Live {
                    trace_id: trace.register_thread(&t.name),
                    name: t.name,
                    ctx: t.ctx,
                    noise_target: t.noise_target,
                    state: ThreadState::Runnable,
                    program: (t.spawn)(cpu),
                    mailbox,
                }
            })
            .collect();

        let mut cx = Context::from_waker(Waker::noop());
        let mut cursor = 0;
        loop {
            self.fire_due_events(&mut trace);
            let n = live.len();
            let Some(i) = (0..n)
                .map(|k| (cursor + k) % n)
                .find(|&i| live[i].state == ThreadState::Runnable)
            else {
                let blocked: Vec<String> = live
                    .iter()
                    .filter(|t| t.state != ThreadState::Done)
                    .map(|t| t.name.clone())
                    .collect();
                if blocked.is_empty() {
                    break;
                }
                return Err(SimError::Deadlock { blocked });
            };
            cursor = i + 1;
            live[i].mailbox.borrow_mut().now = self.clock.now_cycles;
            match live[i].program.as_mut().poll(&mut cx) {
                Poll::Ready(Ok(())) => live[i].state = ThreadState::Done,
                Poll::Ready(Err(e)) => return Err(e),
                Poll::Pending => {
                    let request = live[i].mailbox.borrow_mut().request.take();
                    let Some(request) = request else {
                        return Err(SimError::ForeignAwait {
                            thread: live[i].name.clone(),
                        });
                    };
                    self.execute(&mut live, i, request, &mut trace);
                }
            }
        }
        Ok(trace)
    }

    fn fire_due_events(&mut self, trace: &mut EventTrace) {
        while let Some(entry) = self.pending.first_entry() {
            if entry.key().0 > self.clock.now_cycles {
                break;
            }
            let event = entry.remove();
            self.fire(event, trace);
        }
    }

    fn fire(&mut self, event: SimEvent, trace: &mut EventTrace) {
        let (kind, scope) = match event {
            SimEvent::SpuriousWalk { ctx, page } => {
                self.mem.spurious_walk(ctx, page);
                self.record_event(trace, TraceKind::SpuriousWalk, None, Some(page));
                return;
            }
            SimEvent::TlbFlush(scope) => (TraceKind::TlbFlush, scope),
            SimEvent::KeystrokeIpi { asid, vpage } => {
                (TraceKind::KeystrokeIpi, TlbScope::Page(asid, vpage))
            }
            SimEvent::PacketArrival { asid, vpage } => {
                (TraceKind::PacketArrival, TlbScope::Page(asid, vpage))
            }
        };
        let (vaddr, ppage) = match scope {
            TlbScope::Page(asid, vpage) => (
                Some(vpage.base_addr()),
                self.mem
                    .translate(asid, vpage.base_addr())
                    .ok()
                    .map(PhysPage::containing),
            ),
            _ => (None, None),
        };
        self.mem.flush_tlb(scope);
        self.record_event(trace, kind, vaddr, ppage);
    }

    fn record_event(
        &self,
        trace: &mut EventTrace,
        kind: TraceKind,
        vaddr: Option<u64>,
        ppage: Option<PhysPage>,
    ) {
        trace.push(TraceRecord {
            cycle: self.clock.now_cycles,
            thread: KERNEL_THREAD,
            kind,
            vaddr,
            ppage,
            latency: 0,
            class: None,
            cost: 0,
        });
    }

    fn on_acquired(&mut self, thread: &Live, trace: &mut EventTrace) {
        let p = self.config.noise.spurious_walk_prob;
        if !thread.noise_target || p <= 0.0 || !self.noise_rng.gen_bool(p) {
            return;
        }
        if self.noise_frames.is_empty() {
            match self.mem.reserve_frames(NOISE_FRAMES) {
                Ok(frames) => self.noise_frames = frames,
                Err(_) => return,
            }
        }
        let page = self.noise_frames[self.next_noise_frame];
        self.next_noise_frame = (self.next_noise_frame + 1) % self.noise_frames.len();
        let ctx = ExecContext {
            tid: OS_TID,
            ..thread.ctx
        };
        self.mem.spurious_walk(ctx, page);
        self.record_event(trace, TraceKind::SpuriousWalk, None, Some(page));
    }

    fn respond(thread: &Live, response: Result<Response, SimError>) {
        thread.mailbox.borrow_mut().response = Some(response);
    }

    fn execute(&mut self, live: &mut [Live], i: usize, request: Request, trace: &mut EventTrace) {
        let overhead = self.config.costs.step_overhead_cycles;
        let ctx = live[i].ctx;
        let mut record = TraceRecord {
            cycle: self.clock.now_cycles,
            thread: live[i].trace_id,
            kind: TraceKind::Compute,
            vaddr: None,
            ppage: None,
            latency: 0,
            class: None,
            cost: overhead,
        };
        let response = match request {
            Request::Access {
                vaddr,
                kind,
                overlapped,
                probe,
            } => {
                let result = self.guard_probe(ctx, vaddr, probe).and_then(|()| {
                    self.mem.access(ctx, vaddr).map_err(SimError::from)
                });
                match result {
                    Ok(out) => {
                        let latency = u64::from(out.latency_cycles);
                        let charged = if overlapped {
                            (latency as f64 * (1.0 - self.config.costs.training_overlap)).round()
                                as u64
                        } else {
                            latency
                        };
                        record.kind = kind;
                        record.vaddr = Some(vaddr);
                        record.ppage = Some(out.ppage);
                        record.latency = out.latency_cycles;
                        record.class = Some(out.latency_class);
                        record.cost = charged + overhead;
                        Ok(Response::Access(out))
                    }
                    Err(e) => {
                        Self::respond(&live[i], Err(e));
                        return;
                    }
                }
            }
            Request::FlushLine(vaddr) => match self.mem.translate(ctx.asid, vaddr) {
                Ok(paddr) => {
                    self.mem.flush_line(paddr);
                    record.kind = TraceKind::FlushLine;
                    record.vaddr = Some(vaddr);
                    record.ppage = Some(PhysPage::containing(paddr));
                    Ok(Response::Done)
                }
                Err(e) => {
                    Self::respond(&live[i], Err(e.into()));
                    return;
                }
            },
            Request::FlushTlb(scope) => {
                if let TlbScope::Page(asid, vpage) = scope {
                    record.vaddr = Some(vpage.base_addr());
                    record.ppage = self
                        .mem
                        .translate(asid, vpage.base_addr())
                        .ok()
                        .map(PhysPage::containing);
                }
                self.mem.flush_tlb(scope);
                let cost = self.config.costs.tlb_flush_cycles;
                record.kind = TraceKind::TlbFlush;
                record.latency = u32::try_from(cost).unwrap_or(u32::MAX);
                record.cost = cost + overhead;
                Ok(Response::Done)
            }
            Request::Compute(cycles) => {
                record.cost = cycles + overhead;
                Ok(Response::Done)
            }
            Request::Acquire(sem) => {
                self.acquire(live, i, sem, trace);
                return;
            }
            Request::Release(sem) => {
                self.release(live, i, sem, trace);
                return;
            }
        };
        trace.push(record);
        self.clock.now_cycles += record.cost;
        Self::respond(&live[i], response);
    }

    fn guard_probe(&self, ctx: ExecContext, vaddr: u64, probe: bool) -> Result<(), SimError> {
        if probe && self.mem.is_line_cached(self.mem.translate(ctx.asid, vaddr)?) {
            return Err(SimError::ProbeLineCached { vaddr });
        }
        Ok(())
    }

    fn sem_index(&self, live: &[Live], i: usize, sem: SemId) -> Result<usize, SimError> {
        if sem.0 < self.sems.len() {
            Ok(sem.0)
        } else {
            Err(SimError::SemaphoreMisuse {
                thread: live[i].name.clone(),
                sem: sem.0,
            })
        }
    }

    fn acquire(&mut self, live: &mut [Live], i: usize, sem: SemId, trace: &mut EventTrace) {
        let s = match self.sem_index(live, i, sem) {
            Ok(s) => s,
            Err(e) => return Self::respond(&live[i], Err(e)),
        };
        match self.sems[s].owner {
            None => {
                self.sems[s].owner = Some(i);
                Self::respond(&live[i], Ok(Response::Done));
                self.on_acquired(&live[i], trace);
            }
            Some(owner) if owner == i => Self::respond(
                &live[i],
                Err(SimError::SemaphoreMisuse {
                    thread: live[i].name.clone(),
                    sem: s,
                }),
            ),
            Some(_) => {
                self.sems[s].wait_queue.push_back(i);
                live[i].state = ThreadState::BlockedOnSem(sem);
            }
        }
    }

    fn release(&mut self, live: &mut [Live], i: usize, sem: SemId, trace: &mut EventTrace) {
        let s = match self.sem_index(live, i, sem) {
            Ok(s) if self.sems[s].owner == Some(i) => s,
            Ok(s) => {
                return Self::respond(
                    &live[i],
                    Err(SimError::SemaphoreMisuse {
                        thread: live[i].name.clone(),
                        sem: s,
                    }),
                )
            }
            Err(e) => return Self::respond(&live[i], Err(e)),
        };
        let next = self.sems[s].wait_queue.pop_front();
        self.sems[s].owner = next;
        Self::respond(&live[i], Ok(Response::Done));
        if let Some(h) = next {
            live[h].state = ThreadState::Runnable;
            Self::respond(&live[h], Ok(Response::Done));
            self.on_acquired(&live[h], trace);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::VirtPage;
    use crate::mem::MapOptions;

    fn sim() -> Simulator {
        Simulator::new(SimConfig::default()).unwrap()
    }

    #[test]
    fn empty_program_leaves_clock_and_trace_empty() {
        let mut s = sim();
        let t = SimThread::new("idle", ExecContext::new(0, 1, 1), |_cpu| async { Ok(()) });
        let trace = s.run(vec![t], Schedule::RoundRobinBySemaphore).unwrap();
        assert!(trace.is_empty());
        assert_eq!(s.now(), 0);
    }

    #[test]
    fn steps_interleave_round_robin() {
        let mut s = sim();
        let mk = |name: &'static str| {
            SimThread::new(name, ExecContext::new(0, 1, 1), |cpu| async move {
                for _ in 0..3 {
                    cpu.compute(10).await?;
                }
                Ok(())
            })
        };
        let trace = s.run(vec![mk("a"), mk("b")], Schedule::RoundRobinBySemaphore).unwrap();
        let order: Vec<&str> = trace
            .records()
            .iter()
            .map(|r| trace.thread_name(r.thread))
            .collect();
        assert_eq!(order, ["a", "b", "a", "b", "a", "b"]);
        assert_eq!(s.now(), 6 * 15);
        assert_eq!(trace.total_cost(), s.now());
    }

    #[test]
    fn release_hands_off_to_queue_head() {
        let mut s = sim();
        let lock = s.new_semaphore();
        let log = Rc::new(RefCell::new(Vec::new()));
        let mk = |name: &'static str| {
            let log = Rc::clone(&log);
            SimThread::new(name, ExecContext::new(0, 1, 1), move |cpu| async move {
                for round in 0..3 {
                    cpu.acquire(lock).await?;
                    log.borrow_mut().push(format!("{name}{round}"));
                    cpu.compute(1).await?;
                    cpu.release(lock).await?;
                }
                Ok(())
            })
        };
        s.run(vec![mk("a"), mk("b")], Schedule::RoundRobinBySemaphore).unwrap();
        assert_eq!(*log.borrow(), ["a0", "b0", "a1", "b1", "a2", "b2"]);
    }

    #[test]
    fn opposite_lock_order_deadlocks() {
        let mut s = sim();
        let x = s.new_semaphore();
        let y = s.new_semaphore();
        let mk = |name: &'static str, first: SemId, second: SemId| {
            SimThread::new(name, ExecContext::new(0, 1, 1), move |cpu| async move {
                cpu.acquire(first).await?;
                cpu.acquire(second).await?;
                Ok(())
            })
        };
        let err = s
            .run(
                vec![mk("t1", x, y), mk("t2", y, x)],
                Schedule::RoundRobinBySemaphore,
            )
            .unwrap_err();
        assert_eq!(
            err,
            SimError::Deadlock {
                blocked: vec!["t1".into(), "t2".into()]
            }
        );
    }

    #[test]
    fn releasing_unowned_semaphore_is_misuse() {
        let mut s = sim();
        let x = s.new_semaphore();
        let t = SimThread::new("t", ExecContext::new(0, 1, 1), move |cpu| async move {
            cpu.release(x).await
        });
        let err = s.run(vec![t], Schedule::RoundRobinBySemaphore).unwrap_err();
        assert!(matches!(err, SimError::SemaphoreMisuse { .. }));
    }

    #[test]
    fn foreign_await_is_reported() {
        struct Never;
        impl Future for Never {
            type Output = ();
            fn poll(self: Pin<&mut Self>, _: &mut Context<'_>) -> Poll<()> {
                Poll::Pending
            }
        }
        let mut s = sim();
        let t = SimThread::new("t", ExecContext::new(0, 1, 1), |_cpu| async {
            Never.await;
            Ok(())
        });
        let err = s.run(vec![t], Schedule::RoundRobinBySemaphore).unwrap_err();
        assert_eq!(err, SimError::ForeignAwait { thread: "t".into() });
    }

    #[test]
    fn events_fire_at_first_scheduling_point_past_their_cycle() {
        let mut s = sim();
        let ctx = ExecContext::new(0, 1, 1);
        s.mem_mut().map_page(ctx, VirtPage(4), MapOptions::new()).unwrap();
        s.inject_event(
            25,
            SimEvent::TlbFlush(TlbScope::Page(ctx.asid, VirtPage(4))),
        )
        .unwrap();
        let t = SimThread::new("t", ctx, |cpu| async move {
            for _ in 0..4 {
                cpu.compute(10).await?;
            }
            Ok(())
        });
        let trace = s.run(vec![t], Schedule::RoundRobinBySemaphore).unwrap();
        let flush = trace
            .records()
            .iter()
            .find(|r| r.kind == TraceKind::TlbFlush)
            .unwrap();
        assert_eq!(flush.cycle, 30);
        assert_eq!(flush.cost, 0);
        assert!(s.inject_event(10, SimEvent::TlbFlush(TlbScope::Global)).is_err());
    }

    #[test]
    fn probe_of_cached_line_fails() {
        let mut s = sim();
        let ctx = ExecContext::new(0, 1, 1);
        s.mem_mut().map_page(ctx, VirtPage(4), MapOptions::new()).unwrap();
        let t = SimThread::new("t", ctx, |cpu| async move {
            let addr = VirtPage(4).line_addr(3);
            cpu.access(addr).await?;
            cpu.probe(addr).await?;
            Ok(())
        });
        let err = s.run(vec![t], Schedule::RoundRobinBySemaphore).unwrap_err();
        assert_eq!(
            err,
            SimError::ProbeLineCached {
                vaddr: VirtPage(4).line_addr(3)
            }
        );
    }

    #[test]
    fn simulator_is_send() {
        fn assert_send<T: Send>() {}
        assert_send::<Simulator>();
    }
}
