//! Attacker building blocks. Each is a short sequence of kernel steps on the
//! caller's [`Cpu`].

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::SimError;
use crate::ids::{Asid, VirtPage, LINES_PER_PAGE};
use crate::kernel::{Cpu, TraceKind};
use crate::mem::{AccessOutcome, LatencyClass, TlbScope};

pub use crate::mem::classify;

/// Misses issued by one training pass.
pub const TRAINING_ACCESSES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeResult {
    pub class: LatencyClass,
    pub latency: u32,
    pub primed_inferred: bool,
}

fn has_fixed_stride(lines: &[u8]) -> bool {
    lines.len() >= 3 && {
        let d = i16::from(lines[1]) - i16::from(lines[0]);
        lines
            .windows(2)
            .all(|w| i16::from(w[1]) - i16::from(w[0]) == d)
    }
}

/// Shuffles `lines` into an order without a constant stride.
pub fn irregular_order<R: Rng + ?Sized>(rng: &mut R, lines: &mut [u8]) {
    if lines.len() < 3 {
        return;
    }
    lines.shuffle(rng);
    while has_fixed_stride(lines) {
        lines.shuffle(rng);
    }
}

/// `count` distinct line indices in an irregular order.
pub fn pick_training_lines<R: Rng + ?Sized>(rng: &mut R, count: usize) -> Vec<u8> {
    let mut lines: Vec<u8> = index::sample(rng, usize::from(LINES_PER_PAGE), count)
        .into_iter()
        .map(|i| i as u8)
        .collect();
    irregular_order(rng, &mut lines);
    lines
}

/// A random line index outside `exclude`.
pub fn pick_probe_line<R: Rng + ?Sized>(rng: &mut R, exclude: &[u8]) -> u8 {
    let free: Vec<u8> = (0..LINES_PER_PAGE).filter(|l| !exclude.contains(l)).collect();
    assert!(!free.is_empty(), "every line is excluded");
    free[rng.gen_range(0..free.len())]
}

/// Flushes the whole page, then misses on `lines` in the given order.
pub async fn train_lines(cpu: &Cpu, vpage: VirtPage, lines: &[u8]) -> Result<(), SimError> {
    for line in 0..LINES_PER_PAGE {
        cpu.flush_line(vpage.line_addr(line)).await?;
    }
    for &line in lines {
        cpu.train_access(vpage.line_addr(line)).await?;
    }
    Ok(())
}

/// Trains on [`TRAINING_ACCESSES`] random lines and returns them.
pub async fn train_page(cpu: &Cpu, vpage: VirtPage) -> Result<Vec<u8>, SimError> {
    let lines = pick_training_lines(&mut *cpu.rng(), TRAINING_ACCESSES);
    train_lines(cpu, vpage, &lines).await?;
    Ok(lines)
}

/// One timed access. The access itself counts as a miss on the page.
pub async fn probe_page(cpu: &Cpu, vpage: VirtPage, line: u8) -> Result<ProbeResult, SimError> {
    let out = cpu.probe(vpage.line_addr(line)).await?;
    Ok(ProbeResult {
        class: out.latency_class,
        latency: out.latency_cycles,
        primed_inferred: out.latency_class == LatencyClass::OptimizedMiss,
    })
}

/// Touches `vpage` to force a page walk in the caller's address space, which
/// displaces the oldest entry owned by another thread of that space.
pub async fn evict_oldest_of(cpu: &Cpu, vpage: VirtPage) -> Result<AccessOutcome, SimError> {
    let vaddr = vpage.base_addr();
    let out = cpu.access_as(vaddr, TraceKind::Evict).await?;
    if !out.page_walked {
        return Err(SimError::NoWalkOccurred {
            ctx: cpu.ctx(),
            vaddr,
        });
    }
    Ok(out)
}

/// Page-scoped TLB shootdown; clears the table entry of the backing frame
/// for every address space that shares it.
pub async fn reset_via_tlb_flush(cpu: &Cpu, asid: Asid, vpage: VirtPage) -> Result<(), SimError> {
    cpu.flush_tlb(TlbScope::Page(asid, vpage)).await
}
