//! State machine of the LLC miss-prediction table ("XPT").
//!
//! The table is fully associative and holds one entry per 4 KiB physical
//! page. A lookup matches on the physical page alone, so a page shared by
//! several processes is trained and triggered jointly. The ASID and TID an
//! entry was allocated under only steer replacement:
//!
//! 1. if the allocating ASID owns entries under other TIDs, the least
//!    recently used of those is replaced;
//! 2. else if the table is full, the global LRU entry is replaced;
//! 3. else the new entry is appended.
//!
//! Every touch stamps the entry with a fresh value of a global clock, so
//! ranks are unique and strictly increase in touch order.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::ConfigError;
use crate::ids::{Asid, ExecContext, PhysPage, Tid};

pub const DEFAULT_CAPACITY: usize = 256;
pub const DEFAULT_TRIGGER_THRESHOLD: u8 = 32;
pub const DEFAULT_SATURATION: u8 = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XptConfig {
    pub capacity: usize,
    pub trigger_threshold: u8,
    /// Upper bound of `miss_count`.
    pub saturation: u8,
    pub enabled: bool,
    /// Whether a global TLB shootdown empties the table.
    pub global_flush_clears: bool,
}

impl Default for XptConfig {
    fn default() -> Self {
        XptConfig {
            capacity: DEFAULT_CAPACITY,
            trigger_threshold: DEFAULT_TRIGGER_THRESHOLD,
            saturation: DEFAULT_SATURATION,
            enabled: true,
            global_flush_clears: true,
        }
    }
}

impl XptConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.capacity == 0 {
            return Err(ConfigError::invalid("xpt.capacity", "must be at least 1"));
        }
        if self.trigger_threshold == 0 {
            return Err(ConfigError::invalid("xpt.threshold", "must be at least 1"));
        }
        if self.trigger_threshold > self.saturation {
            return Err(ConfigError::invalid(
                "xpt.threshold",
                format!("exceeds the counter saturation {}", self.saturation),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct XptEntry {
    pub phys_page: PhysPage,
    pub asid: Asid,
    pub tid: Tid,
    pub miss_count: u8,
    pub lru_rank: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionReason {
    Disabled,
    TableMiss,
    BelowThreshold,
    Triggered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefetchDecision {
    pub triggered: bool,
    pub reason: DecisionReason,
}

impl From<DecisionReason> for PrefetchDecision {
    fn from(reason: DecisionReason) -> Self {
        PrefetchDecision {
            triggered: reason == DecisionReason::Triggered,
            reason,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlushScope {
    Page(PhysPage),
    FullAsid(Asid),
    Global,
}

#[derive(Debug, Clone)]
pub struct XptTable {
    config: XptConfig,
    entries: HashMap<PhysPage, XptEntry>,
    by_rank: BTreeMap<u64, PhysPage>,
    by_owner: BTreeMap<(Asid, Tid, u64), PhysPage>,
    clock: u64,
}

impl XptTable {
    pub fn new(config: XptConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(XptTable {
            config,
            entries: HashMap::new(),
            by_rank: BTreeMap::new(),
            by_owner: BTreeMap::new(),
            clock: 0,
        })
    }

    pub fn config(&self) -> &XptConfig {
        &self.config
    }

    pub fn is_enabled(&self) -> bool {
        self.config.enabled
    }

    pub fn set_enabled(&mut self, enabled: bool) {
        self.config.enabled = enabled;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Last rank handed out; zero before the first touch.
    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn get(&self, page: PhysPage) -> Option<&XptEntry> {
        self.entries.get(&page)
    }

    pub fn contains(&self, page: PhysPage) -> bool {
        self.entries.contains_key(&page)
    }

    /// Entries from least to most recently used.
    pub fn entries(&self) -> impl Iterator<Item = &XptEntry> + '_ {
        self.by_rank.values().map(move |p| &self.entries[p])
    }

    /// Read-only; never refreshes recency.
    pub fn is_primed(&self, page: PhysPage) -> bool {
        self.config.enabled
            && self
                .entries
                .get(&page)
                .is_some_and(|e| e.miss_count >= self.config.trigger_threshold)
    }

    pub fn on_llc_miss(&mut self, page: PhysPage, ctx: ExecContext) -> PrefetchDecision {
        if !self.config.enabled {
            return DecisionReason::Disabled.into();
        }
        if !self.entries.contains_key(&page) {
            self.allocate(page, ctx);
            return DecisionReason::TableMiss.into();
        }
        let saturation = self.config.saturation;
        let threshold = self.config.trigger_threshold;
        let entry = self.touch(page);
        entry.miss_count = entry.miss_count.saturating_add(1).min(saturation);
        if entry.miss_count >= threshold {
            DecisionReason::Triggered.into()
        } else {
            DecisionReason::BelowThreshold.into()
        }
    }

    /// Page-walk hook. A resident page is refreshed; otherwise it is
    /// allocated and the displaced entry, if any, is returned.
    pub fn on_page_walk(&mut self, page: PhysPage, ctx: ExecContext) -> Option<XptEntry> {
        if !self.config.enabled {
            return None;
        }
        if self.entries.contains_key(&page) {
            self.touch(page);
            return None;
        }
        self.allocate(page, ctx)
    }

    pub fn on_tlb_flush(&mut self, scope: FlushScope) -> usize {
        match scope {
            FlushScope::Page(page) => usize::from(self.remove(page).is_some()),
            FlushScope::FullAsid(asid) => {
                let pages: Vec<PhysPage> = self
                    .by_owner
                    .range((asid, Tid(0), 0)..=(asid, Tid(u32::MAX), u64::MAX))
                    .map(|(_, &p)| p)
                    .collect();
                for &p in &pages {
                    self.remove(p);
                }
                pages.len()
            }
            FlushScope::Global if self.config.global_flush_clears => {
                let n = self.entries.len();
                self.entries.clear();
                self.by_rank.clear();
                self.by_owner.clear();
                n
            }
            FlushScope::Global => 0,
        }
    }

    /// One line per entry in LRU order: `phys_page asid tid miss_count lru_rank`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in self.entries() {
            let _ = writeln!(
                out,
                "{:#x} {} {} {} {}",
                e.phys_page.0, e.asid, e.tid, e.miss_count, e.lru_rank
            );
        }
        out
    }

    fn next_rank(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn touch(&mut self, page: PhysPage) -> &mut XptEntry {
        let rank = self.next_rank();
        let entry = self.entries.get_mut(&page).expect("touch of absent entry");
        self.by_rank.remove(&entry.lru_rank);
        self.by_owner.remove(&(entry.asid, entry.tid, entry.lru_rank));
        entry.lru_rank = rank;
        self.by_rank.insert(rank, page);
        self.by_owner.insert((entry.asid, entry.tid, rank), page);
        entry
    }

    fn remove(&mut self, page: PhysPage) -> Option<XptEntry> {
        let entry = self.entries.remove(&page)?;
        self.by_rank.remove(&entry.lru_rank);
        self.by_owner.remove(&(entry.asid, entry.tid, entry.lru_rank));
        Some(entry)
    }

    fn allocate(&mut self, page: PhysPage, ctx: ExecContext) -> Option<XptEntry> {
        let victim = self.lru_of_other_tids(ctx.asid, ctx.tid).or_else(|| {
            (self.entries.len() >= self.config.capacity)
                .then(|| self.by_rank.values().next().copied())
                .flatten()
        });
        let evicted = victim.and_then(|p| self.remove(p));
        let rank = self.next_rank();
        self.entries.insert(
            page,
            XptEntry {
                phys_page: page,
                asid: ctx.asid,
                tid: ctx.tid,
                miss_count: 1,
                lru_rank: rank,
            },
        );
        self.by_rank.insert(rank, page);
        self.by_owner.insert((ctx.asid, ctx.tid, rank), page);
        evicted
    }

    /// Oldest entry of `asid` owned by a TID other than `tid`. Visits each
    /// owning TID once, taking its oldest entry.
    fn lru_of_other_tids(&self, asid: Asid, tid: Tid) -> Option<PhysPage> {
        let mut best: Option<(u64, PhysPage)> = None;
        let mut from = (asid, Tid(0), 0);
        while let Some((&(a, t, rank), &page)) = self.by_owner.range(from..).next() {
            if a != asid {
                break;
            }
            if t != tid && best.is_none_or(|(r, _)| rank < r) {
                best = Some((rank, page));
            }
            match t.0.checked_add(1) {
                Some(next) => from = (asid, Tid(next), 0),
                None => break,
            }
        }
        best.map(|(_, p)| p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> XptTable {
        XptTable::new(XptConfig::default()).unwrap()
    }

    fn ctx(asid: u32, tid: u32) -> ExecContext {
        ExecContext::new(0, asid, tid)
    }

    fn train(t: &mut XptTable, page: u64, c: ExecContext, n: usize) {
        for _ in 0..n {
            t.on_llc_miss(PhysPage(page), c);
        }
    }

    #[test]
    fn first_miss_allocates_with_count_one() {
        let mut t = table();
        let d = t.on_llc_miss(PhysPage(9), ctx(1, 1));
        assert_eq!(d.reason, DecisionReason::TableMiss);
        assert!(!d.triggered);
        assert_eq!(t.get(PhysPage(9)).unwrap().miss_count, 1);
    }

    #[test]
    fn thirty_second_miss_triggers() {
        let mut t = table();
        train(&mut t, 5, ctx(1, 1), 31);
        assert!(!t.is_primed(PhysPage(5)));
        let d = t.on_llc_miss(PhysPage(5), ctx(1, 1));
        assert_eq!(d.reason, DecisionReason::Triggered);
        assert!(t.is_primed(PhysPage(5)));
    }

    #[test]
    fn counter_saturates() {
        let mut t = table();
        train(&mut t, 5, ctx(1, 1), 200);
        assert_eq!(t.get(PhysPage(5)).unwrap().miss_count, DEFAULT_SATURATION);
    }

    #[test]
    fn disabled_table_is_inert() {
        let mut t = XptTable::new(XptConfig {
            enabled: false,
            ..XptConfig::default()
        })
        .unwrap();
        let d = t.on_llc_miss(PhysPage(1), ctx(1, 1));
        assert_eq!(d.reason, DecisionReason::Disabled);
        assert!(t.on_page_walk(PhysPage(2), ctx(1, 1)).is_none());
        assert!(t.is_empty());
    }

    #[test]
    fn is_primed_does_not_touch() {
        let mut t = table();
        train(&mut t, 5, ctx(1, 1), 32);
        let before = t.dump();
        assert!(t.is_primed(PhysPage(5)));
        assert!(!t.is_primed(PhysPage(6)));
        assert_eq!(t.dump(), before);
    }

    #[test]
    fn walk_by_other_thread_evicts_oldest_of_that_asid() {
        let mut t = table();
        train(&mut t, 0xA, ctx(1, 1), 32);
        train(&mut t, 0xB, ctx(1, 1), 32);
        let evicted = t.on_page_walk(PhysPage(0xC), ctx(1, 2)).unwrap();
        assert_eq!(evicted.phys_page, PhysPage(0xA));
        assert!(t.is_primed(PhysPage(0xB)));
    }

    #[test]
    fn walk_by_other_process_leaves_entries() {
        let mut t = table();
        train(&mut t, 0xA, ctx(1, 1), 32);
        assert!(t.on_page_walk(PhysPage(0xB), ctx(2, 1)).is_none());
        assert!(t.is_primed(PhysPage(0xA)));
    }

    #[test]
    fn own_entries_are_never_evicted_by_own_walks() {
        let mut t = table();
        train(&mut t, 0xA, ctx(1, 1), 32);
        t.on_page_walk(PhysPage(0xB), ctx(1, 1));
        assert!(t.is_primed(PhysPage(0xA)));
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn resident_walk_refreshes_without_evicting() {
        let mut t = table();
        train(&mut t, 0xA, ctx(1, 1), 32);
        train(&mut t, 0xB, ctx(1, 1), 32);
        assert!(t.on_page_walk(PhysPage(0xA), ctx(1, 2)).is_none());
        // 0xA is now the most recent, so the next foreign walk takes 0xB.
        let evicted = t.on_page_walk(PhysPage(0xC), ctx(1, 2)).unwrap();
        assert_eq!(evicted.phys_page, PhysPage(0xB));
    }

    #[test]
    fn hit_by_other_tid_keeps_owner() {
        let mut t = table();
        train(&mut t, 0xA, ctx(1, 1), 3);
        t.on_llc_miss(PhysPage(0xA), ctx(1, 2));
        assert_eq!(t.get(PhysPage(0xA)).unwrap().tid, Tid(1));
    }

    #[test]
    fn full_table_replaces_global_lru() {
        let mut t = XptTable::new(XptConfig {
            capacity: 3,
            ..XptConfig::default()
        })
        .unwrap();
        for p in 0..3 {
            t.on_llc_miss(PhysPage(p), ctx(p as u32, 1));
        }
        t.on_llc_miss(PhysPage(0), ctx(0, 1));
        t.on_llc_miss(PhysPage(10), ctx(9, 1));
        assert_eq!(t.len(), 3);
        assert!(t.get(PhysPage(1)).is_none());
        assert!(t.get(PhysPage(0)).is_some());
    }

    #[test]
    fn flush_scopes() {
        let mut t = table();
        for p in 0..3 {
            t.on_llc_miss(PhysPage(p), ctx(7, 1));
        }
        t.on_llc_miss(PhysPage(10), ctx(8, 1));
        assert_eq!(t.on_tlb_flush(FlushScope::Page(PhysPage(99))), 0);
        assert_eq!(t.on_tlb_flush(FlushScope::FullAsid(Asid(7))), 3);
        assert_eq!(t.len(), 1);
        assert_eq!(t.on_tlb_flush(FlushScope::Global), 1);
        assert!(t.is_empty());
    }

    #[test]
    fn global_flush_can_be_configured_to_keep_entries() {
        let mut t = XptTable::new(XptConfig {
            global_flush_clears: false,
            ..XptConfig::default()
        })
        .unwrap();
        t.on_llc_miss(PhysPage(1), ctx(1, 1));
        assert_eq!(t.on_tlb_flush(FlushScope::Global), 0);
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn dump_is_lru_ordered() {
        let mut t = table();
        t.on_llc_miss(PhysPage(0x10), ctx(1, 1));
        t.on_llc_miss(PhysPage(0x20), ctx(2, 3));
        t.on_llc_miss(PhysPage(0x10), ctx(1, 1));
        assert_eq!(t.dump(), "0x20 2 3 1 2\n0x10 1 1 2 3\n");
    }

    #[test]
    fn threshold_above_saturation_is_rejected() {
        let cfg = XptConfig {
            trigger_threshold: 65,
            ..XptConfig::default()
        };
        assert!(XptTable::new(cfg).is_err());
    }
}
