//! Memory hierarchy: page tables, per-core TLBs, a shared LLC presence set
//! and the three-class latency model. Every load goes through
//! [`MemorySystem::access`], which also drives the prediction table.

mod latency;
mod llc;
mod page_table;
mod tlb;

pub use latency::{
    classify, LatencyClass, LatencyModel, LLC_HIT_MAX, NORMAL_MIN, OPTIMIZED_MAX, OPTIMIZED_MIN,
};
pub use llc::LlcModel;
pub use page_table::{PageMapping, PageSize, PageTable};
pub use tlb::Tlb;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ConfigError, MemError};
use crate::ids::{Asid, ExecContext, PhysPage, VirtPage, PAGE_SIZE};
use crate::xpt::{FlushScope, XptConfig, XptEntry, XptTable};

pub const DEFAULT_NUM_CORES: u16 = 16;
pub const DEFAULT_PHYS_POOL_BYTES: u64 = 32 << 30;
pub const DEFAULT_TLB_CAPACITY: usize = 1536;
pub const DEFAULT_LLC_LINES: usize = (54 << 20) / 64;
/// First frame handed out by the allocator.
pub const PHYS_BASE_PAGE: u64 = 0x100;

#[derive(Debug, Clone, PartialEq)]
pub struct MachineConfig {
    pub num_cores: u16,
    pub phys_pool_bytes: u64,
    pub tlb_capacity: usize,
    pub llc_capacity_lines: usize,
    pub latency: LatencyModel,
    pub xpt: XptConfig,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            num_cores: DEFAULT_NUM_CORES,
            phys_pool_bytes: DEFAULT_PHYS_POOL_BYTES,
            tlb_capacity: DEFAULT_TLB_CAPACITY,
            llc_capacity_lines: DEFAULT_LLC_LINES,
            latency: LatencyModel::default(),
            xpt: XptConfig::default(),
        }
    }
}

impl MachineConfig {
    pub fn validate(&self, jitter: u32) -> Result<(), ConfigError> {
        if self.num_cores == 0 {
            return Err(ConfigError::invalid("machine.num_cores", "must be at least 1"));
        }
        if self.tlb_capacity == 0 {
            return Err(ConfigError::invalid("machine.tlb_capacity", "must be at least 1"));
        }
        if self.llc_capacity_lines == 0 {
            return Err(ConfigError::invalid("machine.llc_lines", "must be at least 1"));
        }
        if self.phys_pool_bytes < PAGE_SIZE {
            return Err(ConfigError::invalid("machine.phys_pool_bytes", "smaller than one page"));
        }
        self.latency.validate(jitter)?;
        self.xpt.validate()
    }
}

/// Monotone frame allocator. Frames are never returned.
#[derive(Debug, Clone)]
pub struct PhysAllocator {
    next: u64,
    end: u64,
}

impl PhysAllocator {
    pub fn new(pool_bytes: u64) -> Self {
        PhysAllocator {
            next: PHYS_BASE_PAGE,
            end: PHYS_BASE_PAGE + pool_bytes / PAGE_SIZE,
        }
    }

    /// Allocates a naturally aligned run of frames for one mapping.
    pub fn alloc(&mut self, size: PageSize) -> Result<PhysPage, MemError> {
        let pages = size.pages();
        let base = self.next.next_multiple_of(pages);
        if base + pages > self.end {
            return Err(MemError::OutOfPhysicalPages);
        }
        self.next = base + pages;
        Ok(PhysPage(base))
    }

    pub fn remaining_pages(&self) -> u64 {
        self.end - self.next
    }

    pub fn owns(&self, page: PhysPage) -> bool {
        page.0 >= PHYS_BASE_PAGE && page.0 < self.next
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MapOptions {
    pub shared_with: Vec<Asid>,
    pub locked: bool,
    pub size: Option<PageSize>,
    pub bind_to: Option<PhysPage>,
}

impl MapOptions {
    pub fn new() -> Self {
        MapOptions::default()
    }

    pub fn shared_with(mut self, asids: impl IntoIterator<Item = Asid>) -> Self {
        self.shared_with.extend(asids);
        self
    }

    pub fn locked(mut self) -> Self {
        self.locked = true;
        self
    }

    pub fn size(mut self, size: PageSize) -> Self {
        self.size = Some(size);
        self
    }

    /// Map onto an existing frame instead of allocating one.
    pub fn bind_to(mut self, page: PhysPage) -> Self {
        self.bind_to = Some(page);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessOutcome {
    pub latency_cycles: u32,
    pub latency_class: LatencyClass,
    pub tlb_hit: bool,
    pub page_walked: bool,
    pub xpt_triggered: bool,
    pub ppage: PhysPage,
    pub paddr: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlbScope {
    Page(Asid, VirtPage),
    Asid(Asid),
    Global,
}

#[derive(Debug, Clone)]
pub struct MemorySystem {
    config: MachineConfig,
    page_table: PageTable,
    allocator: PhysAllocator,
    tlbs: Vec<Tlb>,
    llc: LlcModel,
    xpt: XptTable,
    jitter: u32,
    rng: ChaCha8Rng,
    walks: u64,
}

impl MemorySystem {
    pub fn new(config: MachineConfig, jitter: u32, seed: u64) -> Result<Self, ConfigError> {
        config.validate(jitter)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(MemorySystem {
            page_table: PageTable::default(),
            allocator: PhysAllocator::new(config.phys_pool_bytes),
            tlbs: (0..config.num_cores)
                .map(|_| Tlb::new(config.tlb_capacity))
                .collect(),
            llc: LlcModel::new(config.llc_capacity_lines),
            xpt: XptTable::new(config.xpt.clone())?,
            config,
            jitter,
            rng,
            walks: 0,
        })
    }

    pub fn config(&self) -> &MachineConfig {
        &self.config
    }

    pub fn xpt(&self) -> &XptTable {
        &self.xpt
    }

    pub fn xpt_mut(&mut self) -> &mut XptTable {
        &mut self.xpt
    }

    pub fn page_table(&self) -> &PageTable {
        &self.page_table
    }

    pub fn llc(&self) -> &LlcModel {
        &self.llc
    }

    pub fn tlb(&self, core: u16) -> Option<&Tlb> {
        self.tlbs.get(usize::from(core))
    }

    /// Total page walks performed by `access`.
    pub fn walk_count(&self) -> u64 {
        self.walks
    }

    pub fn allocator(&self) -> &PhysAllocator {
        &self.allocator
    }

    /// Frames taken from the pool without any mapping.
    pub fn reserve_frames(&mut self, count: usize) -> Result<Vec<PhysPage>, MemError> {
        (0..count)
            .map(|_| self.allocator.alloc(PageSize::Size4K))
            .collect()
    }

    /// Maps `vpage` in `ctx.asid` and at the same virtual page in every ASID
    /// of `options.shared_with`.
    pub fn map_page(
        &mut self,
        ctx: ExecContext,
        vpage: VirtPage,
        options: MapOptions,
    ) -> Result<PageMapping, MemError> {
        let size = options.size.unwrap_or(PageSize::Size4K);
        if vpage.0 % size.pages() != 0 {
            return Err(MemError::Misaligned { vpage });
        }
        let mut asids = vec![ctx.asid];
        for a in &options.shared_with {
            if !asids.contains(a) {
                asids.push(*a);
            }
        }
        for &asid in &asids {
            if !self.page_table.range_is_free(asid, vpage, size.pages()) {
                return Err(MemError::AlreadyMapped { asid, vpage });
            }
        }
        let ppage = match options.bind_to {
            Some(frame) => {
                if !self.allocator.owns(frame) || frame.0 % size.pages() != 0 {
                    return Err(MemError::ForeignFrame(frame));
                }
                frame
            }
            None => self.allocator.alloc(size)?,
        };
        let shared = asids.len() > 1 || options.bind_to.is_some();
        let mut first = None;
        for asid in asids {
            let mapping = PageMapping {
                vpage,
                ppage,
                asid,
                size,
                shared,
                locked: options.locked,
            };
            self.page_table.insert(mapping)?;
            first.get_or_insert(mapping);
        }
        Ok(first.expect("at least the caller's asid is mapped"))
    }

    /// Page-table translation with no TLB or cache side effects.
    pub fn translate(&self, asid: Asid, vaddr: u64) -> Result<u64, MemError> {
        let vpage = VirtPage::containing(vaddr);
        let mapping = self
            .page_table
            .lookup(asid, vpage)
            .ok_or(MemError::UnmappedAddress { asid, vaddr })?;
        Ok(mapping.translate(vpage).base_addr() + vaddr % PAGE_SIZE)
    }

    fn check_core(&self, ctx: ExecContext) -> Result<usize, MemError> {
        let core = usize::from(ctx.core.0);
        if core >= self.tlbs.len() {
            return Err(MemError::InvalidCore {
                core: ctx.core.0,
                num_cores: self.config.num_cores,
            });
        }
        Ok(core)
    }

    /// One load. On a TLB miss the walk is reported to the table; on an LLC
    /// miss the miss is reported unless the walk just allocated the entry, in
    /// which case that allocation already counted this miss.
    pub fn access(&mut self, ctx: ExecContext, vaddr: u64) -> Result<AccessOutcome, MemError> {
        let core = self.check_core(ctx)?;
        let vpage = VirtPage::containing(vaddr);
        let mapping = *self
            .page_table
            .lookup(ctx.asid, vpage)
            .ok_or(MemError::UnmappedAddress {
                asid: ctx.asid,
                vaddr,
            })?;
        let ppage = mapping.translate(vpage);
        let primed_before = self.xpt.is_primed(ppage);
        let resident_before = self.xpt.contains(ppage);

        let tlb_hit = match self.tlbs[core].lookup(ctx.asid, vpage) {
            Some(cached) => {
                debug_assert_eq!(cached, ppage, "TLB disagrees with page table");
                true
            }
            None => {
                self.tlbs[core].insert(&mapping);
                self.walks += 1;
                self.xpt.on_page_walk(ppage, ctx);
                false
            }
        };

        let paddr = ppage.base_addr() + vaddr % PAGE_SIZE;
        let (class, xpt_triggered) = if self.llc.contains(paddr) {
            (LatencyClass::LlcHit, false)
        } else {
            let walk_allocated = !tlb_hit && !resident_before && self.xpt.contains(ppage);
            let triggered = !walk_allocated && self.xpt.on_llc_miss(ppage, ctx).triggered;
            self.llc.fill(paddr);
            let class = if primed_before {
                LatencyClass::OptimizedMiss
            } else {
                LatencyClass::NormalMiss
            };
            (class, triggered)
        };
        let latency_cycles = self.config.latency.sample(class, self.jitter, &mut self.rng);
        Ok(AccessOutcome {
            latency_cycles,
            latency_class: class,
            tlb_hit,
            page_walked: !tlb_hit,
            xpt_triggered,
            ppage,
            paddr,
        })
    }

    pub fn flush_line(&mut self, paddr: u64) {
        self.llc.flush(paddr);
    }

    pub fn is_line_cached(&self, paddr: u64) -> bool {
        self.llc.contains(paddr)
    }

    /// Returns the number of table entries removed.
    pub fn flush_tlb(&mut self, scope: TlbScope) -> usize {
        match scope {
            TlbScope::Page(asid, vpage) => {
                for tlb in &mut self.tlbs {
                    tlb.invalidate_page(asid, vpage);
                }
                match self.page_table.lookup(asid, vpage) {
                    Some(m) => self.xpt.on_tlb_flush(FlushScope::Page(m.translate(vpage))),
                    None => 0,
                }
            }
            TlbScope::Asid(asid) => {
                for tlb in &mut self.tlbs {
                    tlb.invalidate_asid(asid);
                }
                self.xpt.on_tlb_flush(FlushScope::FullAsid(asid))
            }
            TlbScope::Global => {
                for tlb in &mut self.tlbs {
                    tlb.clear();
                }
                self.xpt.on_tlb_flush(FlushScope::Global)
            }
        }
    }

    /// A walk performed outside any simulated thread's instruction stream.
    pub fn spurious_walk(&mut self, ctx: ExecContext, page: PhysPage) -> Option<XptEntry> {
        self.xpt.on_page_walk(page, ctx)
    }

    pub fn dump_page_table(&self) -> String {
        self.page_table.dump()
    }

    /// Per core: a `core N` header followed by that core's TLB dump.
    pub fn dump_tlbs(&self) -> String {
        let mut out = String::new();
        for (core, tlb) in self.tlbs.iter().enumerate() {
            if tlb.is_empty() {
                continue;
            }
            let _ = writeln!(out, "core {core}");
            out.push_str(&tlb.dump());
        }
        out
    }
}
