use thiserror::Error;

use crate::ids::{Asid, ExecContext, PhysPage, VirtPage};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
}

impl ConfigError {
    pub fn invalid(key: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemError {
    #[error("virtual page {vpage} already mapped in asid {asid}")]
    AlreadyMapped { asid: Asid, vpage: VirtPage },
    #[error("physical page pool exhausted")]
    OutOfPhysicalPages,
    #[error("no mapping for {vaddr:#x} in asid {asid}")]
    UnmappedAddress { asid: Asid, vaddr: u64 },
    #[error("core {core} does not exist (machine has {num_cores})")]
    InvalidCore { core: u16, num_cores: u16 },
    #[error("physical page {0} is not backed by the pool")]
    ForeignFrame(PhysPage),
    #[error("virtual page {vpage} is not aligned for the requested page size")]
    Misaligned { vpage: VirtPage },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("deadlock: all live threads blocked ({})", .blocked.join(", "))]
    Deadlock { blocked: Vec<String> },
    #[error("probe of {vaddr:#x} hit a cached line")]
    ProbeLineCached { vaddr: u64 },
    #[error("access to {vaddr:#x} by {ctx} did not walk the page table")]
    NoWalkOccurred { ctx: ExecContext, vaddr: u64 },
    #[error("victim ran {iterations} iterations in one round")]
    SyncViolation { iterations: u64 },
    #[error("thread `{thread}` misused semaphore {sem}")]
    SemaphoreMisuse { thread: String, sem: usize },
    #[error("thread `{thread}` awaited a future outside the simulator")]
    ForeignAwait { thread: String },
    #[error("event scheduled at cycle {at} but the clock is already at {now}")]
    EventInPast { at: u64, now: u64 },
    #[error("{0}")]
    Protocol(String),
}
