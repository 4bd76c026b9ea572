//! Exponent recovery against two modular-exponentiation skeletons.
//!
//! Victim and attacker are threads of one address space on different cores,
//! sharing a CPU lock. Only the page-touch pattern of each iteration is
//! modeled.

use std::cell::{Cell, RefCell};
use std::fmt::Write as _;
use std::rc::Rc;

use crate::error::SimError;
use crate::ids::{ExecContext, VirtPage};
use crate::kernel::{CostModel, Cpu, NoiseModel, Schedule, SemId, SimConfig, SimThread, Simulator, TraceKind};
use crate::mem::{LatencyClass, MachineConfig, MapOptions, TlbScope};
use crate::primitives::{pick_probe_line, probe_page, train_page};

pub const ATTACKER: ExecContext = ExecContext::new(0, 1, 1);
pub const VICTIM: ExecContext = ExecContext::new(1, 1, 2);

/// Bits of `value`, least significant first.
pub fn bits_lsb_first(value: u64, len: usize) -> Vec<bool> {
    assert!(len <= 64, "at most 64 exponent bits");
    (0..len).map(|i| value >> i & 1 == 1).collect()
}

/// Square-and-multiply: iteration `i` reads the base page iff bit `i` is set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SqmRsaVictim {
    pub exponent: Vec<bool>,
    pub base_vpage: VirtPage,
    /// Iterations executed per scheduling round. Anything but 1 breaks the
    /// attacker's synchronization.
    pub iterations_per_round: u32,
}

impl SqmRsaVictim {
    pub fn new(exponent: Vec<bool>) -> Self {
        SqmRsaVictim {
            exponent,
            base_vpage: VirtPage(0x5000),
            iterations_per_round: 1,
        }
    }

    pub fn from_value(value: u64, bits: usize) -> Self {
        Self::new(bits_lsb_first(value, bits))
    }
}

/// Montgomery ladder: both calls run every iteration, in an order set by the
/// bit (res1 first for 1, res2 first for 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlRsaVictim {
    pub exponent: Vec<bool>,
    pub res1_vpage: VirtPage,
    pub res2_vpage: VirtPage,
    pub iterations_per_round: u32,
}

impl MlRsaVictim {
    pub fn new(exponent: Vec<bool>) -> Self {
        MlRsaVictim {
            exponent,
            res1_vpage: VirtPage(0x6000),
            res2_vpage: VirtPage(0x6001),
            iterations_per_round: 1,
        }
    }

    pub fn from_value(value: u64, bits: usize) -> Self {
        Self::new(bits_lsb_first(value, bits))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub repetitions: u32,
    pub noise: NoiseModel,
    pub machine: MachineConfig,
    pub costs: CostModel,
    /// Attacker-owned page used by the square-and-multiply attack.
    pub sentinel_vpage: VirtPage,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            repetitions: 10,
            noise: NoiseModel::default(),
            machine: MachineConfig::default(),
            costs: CostModel::default(),
            sentinel_vpage: VirtPage(0x9000),
        }
    }
}

impl AttackConfig {
    pub fn with_noise(mut self, noise: NoiseModel) -> Self {
        self.noise = noise;
        self
    }

    fn simulator(&self) -> Result<Simulator, SimError> {
        Ok(Simulator::new(SimConfig {
            machine: self.machine.clone(),
            costs: self.costs.clone(),
            noise: self.noise.clone(),
        })?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitObservation {
    pub bit_index: usize,
    pub rep: u32,
    pub cycle: u64,
    pub class: LatencyClass,
    pub latency: u32,
    pub decision: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredSecret {
    /// Least significant first.
    pub bits: Vec<bool>,
    /// Votes for 1 per bit.
    pub per_bit_votes: Vec<u32>,
    pub repetitions: u32,
    /// Mean over bits of the majority share of votes.
    pub confidence: f64,
    pub observations: Vec<BitObservation>,
}

pub const BIT_CSV_HEADER: &str = "bit_index,rep,probe_class,decision";

impl RecoveredSecret {
    fn from_observations(nbits: usize, repetitions: u32, observations: Vec<BitObservation>) -> Self {
        let mut votes = vec![0u32; nbits];
        for o in &observations {
            votes[o.bit_index] += u32::from(o.decision);
        }
        let bits: Vec<bool> = votes.iter().map(|&v| 2 * v > repetitions).collect();
        let confidence = if nbits == 0 {
            1.0
        } else {
            votes
                .iter()
                .map(|&v| f64::from(v.max(repetitions - v)) / f64::from(repetitions))
                .sum::<f64>()
                / nbits as f64
        };
        RecoveredSecret {
            bits,
            per_bit_votes: votes,
            repetitions,
            confidence,
            observations,
        }
    }

    pub fn to_u64(&self) -> u64 {
        self.bits
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &b)| acc | u64::from(b) << i)
    }

    pub fn bits_csv(&self) -> String {
        let mut out = format!("{BIT_CSV_HEADER}\n");
        for o in &self.observations {
            let _ = writeln!(out, "{},{},{},{}", o.bit_index, o.rep, o.class, u8::from(o.decision));
        }
        out
    }
}

type Log = Rc<RefCell<Vec<BitObservation>>>;

async fn probe_and_log(
    cpu: &Cpu,
    page: VirtPage,
    trained: &[u8],
    bit_index: usize,
    rep: u32,
    log: &Log,
) -> Result<(), SimError> {
    let line = pick_probe_line(&mut *cpu.rng(), trained);
    cpu.flush_line(page.line_addr(line)).await?;
    let cycle = cpu.now();
    let probe = probe_page(cpu, page, line).await?;
    log.borrow_mut().push(BitObservation {
        bit_index,
        rep,
        cycle,
        class: probe.class,
        latency: probe.latency,
        decision: probe.class == LatencyClass::NormalMiss,
    });
    Ok(())
}

/// Checks that the victim ran exactly `step` units since the last check.
fn check_round(progress: &Cell<u64>, seen: &mut u64, step: u64) -> Result<(), SimError> {
    let ran = progress.get() - *seen;
    *seen = progress.get();
    if ran != step {
        return Err(SimError::SyncViolation { iterations: ran });
    }
    Ok(())
}

fn finish(
    nbits: usize,
    repetitions: u32,
    log: Log,
) -> Result<RecoveredSecret, SimError> {
    let observations = log.take();
    Ok(RecoveredSecret::from_observations(nbits, repetitions, observations))
}

async fn prime_sentinel(cpu: &Cpu, base: VirtPage, sentinel: VirtPage) -> Result<Vec<u8>, SimError> {
    cpu.flush_tlb(TlbScope::Page(VICTIM.asid, base)).await?;
    train_page(cpu, sentinel).await
}

/// Per round the attacker probes the sentinel (result of the previous victim
/// iteration), shoots down the base page's translation and retrains the
/// sentinel. A 1-iteration walks the base page, displacing the sentinel.
pub fn attack_sqm_rsa(
    victim: &SqmRsaVictim,
    config: &AttackConfig,
) -> Result<RecoveredSecret, SimError> {
    let nbits = victim.exponent.len();
    let reps = config.repetitions;
    if reps == 0 {
        return Err(SimError::Protocol("at least one repetition is required".into()));
    }
    let mut sim = config.simulator()?;
    let base = victim.base_vpage;
    let sentinel = config.sentinel_vpage;
    sim.mem_mut().map_page(VICTIM, base, MapOptions::new().locked())?;
    sim.mem_mut().map_page(ATTACKER, sentinel, MapOptions::new().locked())?;
    let lock = sim.new_semaphore();
    let rounds = nbits as u64 * u64::from(reps);
    let progress = Rc::new(Cell::new(0u64));
    let log: Log = Rc::new(RefCell::new(Vec::new()));

    let attacker = {
        let (progress, log) = (Rc::clone(&progress), Rc::clone(&log));
        SimThread::new("attacker", ATTACKER, move |cpu| async move {
            let mut seen = 0;
            cpu.acquire(lock).await?;
            let mut trained = prime_sentinel(&cpu, base, sentinel).await?;
            cpu.release(lock).await?;
            for round in 0..rounds {
                cpu.acquire(lock).await?;
                check_round(&progress, &mut seen, 1)?;
                let bit_index = (round % nbits as u64) as usize;
                let rep = (round / nbits as u64) as u32;
                probe_and_log(&cpu, sentinel, &trained, bit_index, rep, &log).await?;
                if round + 1 < rounds {
                    trained = prime_sentinel(&cpu, base, sentinel).await?;
                }
                cpu.release(lock).await?;
            }
            Ok(())
        })
        .noise_target()
    };

    let exponent = victim.exponent.clone();
    let per_round = u64::from(victim.iterations_per_round.max(1));
    let victim_thread = {
        let progress = Rc::clone(&progress);
        SimThread::new("victim", VICTIM, move |cpu| async move {
            let mut done = 0;
            while done < rounds {
                cpu.acquire(lock).await?;
                for _ in 0..per_round.min(rounds - done) {
                    let bit = exponent[(done % nbits as u64) as usize];
                    cpu.compute(120).await?;
                    if bit {
                        cpu.access_as(base.line_addr(0), TraceKind::Victim).await?;
                    }
                    done += 1;
                    progress.set(done);
                }
                cpu.release(lock).await?;
            }
            Ok(())
        })
    };

    if nbits > 0 {
        sim.run(vec![attacker, victim_thread], Schedule::RoundRobinBySemaphore)?;
    }
    finish(nbits, reps, log)
}

async fn ml_call(cpu: &Cpu, page: VirtPage) -> Result<(), SimError> {
    cpu.access_as(page.line_addr(0), TraceKind::Victim).await?;
    cpu.compute(120).await
}

/// Per round the attacker shoots down both result pages' translations and
/// trains res2; after the victim's first call it probes res2. A first call
/// on res1 walks res1 and displaces res2.
pub fn attack_ml_rsa(victim: &MlRsaVictim, config: &AttackConfig) -> Result<RecoveredSecret, SimError> {
    let nbits = victim.exponent.len();
    let reps = config.repetitions;
    if reps == 0 {
        return Err(SimError::Protocol("at least one repetition is required".into()));
    }
    let mut sim = config.simulator()?;
    let (res1, res2) = (victim.res1_vpage, victim.res2_vpage);
    sim.mem_mut().map_page(VICTIM, res1, MapOptions::new().locked())?;
    sim.mem_mut().map_page(VICTIM, res2, MapOptions::new().locked())?;
    let lock: SemId = sim.new_semaphore();
    let rounds = nbits as u64 * u64::from(reps);
    // Counts victim calls, two per iteration; each victim section runs one.
    let progress = Rc::new(Cell::new(0u64));
    let log: Log = Rc::new(RefCell::new(Vec::new()));

    let attacker = {
        let (progress, log) = (Rc::clone(&progress), Rc::clone(&log));
        SimThread::new("attacker", ATTACKER, move |cpu| async move {
            let mut seen = 0;
            for round in 0..rounds {
                cpu.acquire(lock).await?;
                check_round(&progress, &mut seen, u64::from(round > 0))?;
                cpu.flush_tlb(TlbScope::Page(VICTIM.asid, res1)).await?;
                cpu.flush_tlb(TlbScope::Page(VICTIM.asid, res2)).await?;
                let trained = train_page(&cpu, res2).await?;
                cpu.release(lock).await?;

                cpu.acquire(lock).await?;
                check_round(&progress, &mut seen, 1)?;
                let bit_index = (round % nbits as u64) as usize;
                let rep = (round / nbits as u64) as u32;
                probe_and_log(&cpu, res2, &trained, bit_index, rep, &log).await?;
                cpu.release(lock).await?;
            }
            Ok(())
        })
        .noise_target()
    };

    let exponent = victim.exponent.clone();
    let per_round = u64::from(victim.iterations_per_round.max(1));
    let victim_thread = {
        let progress = Rc::clone(&progress);
        SimThread::new("victim", VICTIM, move |cpu| async move {
            let total_calls = 2 * rounds;
            let mut calls = 0;
            while calls < total_calls {
                cpu.acquire(lock).await?;
                for _ in 0..per_round.min(total_calls - calls) {
                    let bit = exponent[((calls / 2) % nbits as u64) as usize];
                    let first = calls % 2 == 0;
                    let page = if bit == first { res1 } else { res2 };
                    ml_call(&cpu, page).await?;
                    calls += 1;
                    progress.set(calls);
                }
                cpu.release(lock).await?;
            }
            Ok(())
        })
    };

    if nbits > 0 {
        sim.run(vec![attacker, victim_thread], Schedule::RoundRobinBySemaphore)?;
    }
    finish(nbits, reps, log)
}
