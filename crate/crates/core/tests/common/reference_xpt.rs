//! Naive prefetcher table: an unordered list, every decision by linear scan.

use rand::Rng;
use xpt_sim::ids::{Asid, ExecContext, PhysPage};
use xpt_sim::xpt::{DecisionReason, FlushScope, XptConfig, XptTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefEntry {
    pub page: u64,
    pub asid: u32,
    pub tid: u32,
    pub count: u8,
    pub rank: u64,
}

#[derive(Debug, Clone)]
pub struct RefXpt {
    pub capacity: usize,
    pub threshold: u8,
    pub saturation: u8,
    pub enabled: bool,
    pub global_clears: bool,
    pub entries: Vec<RefEntry>,
    pub clock: u64,
}

impl RefXpt {
    pub fn new(cfg: &XptConfig) -> Self {
        RefXpt {
            capacity: cfg.capacity,
            threshold: cfg.trigger_threshold,
            saturation: cfg.saturation,
            enabled: cfg.enabled,
            global_clears: cfg.global_flush_clears,
            entries: Vec::new(),
            clock: 0,
        }
    }

    fn find(&self, page: u64) -> Option<usize> {
        self.entries.iter().position(|e| e.page == page)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn allocate(&mut self, page: u64, asid: u32, tid: u32) -> Option<RefEntry> {
        let same_space = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.asid == asid && e.tid != tid)
            .min_by_key(|(_, e)| e.rank)
            .map(|(i, _)| i);
        let victim = same_space.or_else(|| {
            if self.entries.len() >= self.capacity {
                self.entries
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, e)| e.rank)
                    .map(|(i, _)| i)
            } else {
                None
            }
        });
        let evicted = victim.map(|i| self.entries.swap_remove(i));
        let rank = self.tick();
        self.entries.push(RefEntry {
            page,
            asid,
            tid,
            count: 1,
            rank,
        });
        evicted
    }

    pub fn miss(&mut self, page: u64, asid: u32, tid: u32) -> DecisionReason {
        if !self.enabled {
            return DecisionReason::Disabled;
        }
        match self.find(page) {
            None => {
                self.allocate(page, asid, tid);
                DecisionReason::TableMiss
            }
            Some(i) => {
                let rank = self.tick();
                let e = &mut self.entries[i];
                e.rank = rank;
                e.count = (e.count + 1).min(self.saturation);
                if e.count >= self.threshold {
                    DecisionReason::Triggered
                } else {
                    DecisionReason::BelowThreshold
                }
            }
        }
    }

    pub fn walk(&mut self, page: u64, asid: u32, tid: u32) -> Option<RefEntry> {
        if !self.enabled {
            return None;
        }
        match self.find(page) {
            Some(i) => {
                let rank = self.tick();
                self.entries[i].rank = rank;
                None
            }
            None => self.allocate(page, asid, tid),
        }
    }

    pub fn flush(&mut self, scope: FlushScope) -> usize {
        let before = self.entries.len();
        match scope {
            FlushScope::Page(p) => self.entries.retain(|e| e.page != p.0),
            FlushScope::FullAsid(a) => self.entries.retain(|e| e.asid != a.0),
            FlushScope::Global => {
                if self.global_clears {
                    self.entries.clear();
                }
            }
        }
        before - self.entries.len()
    }

    pub fn primed(&self, page: u64) -> bool {
        self.enabled
            && self
                .find(page)
                .is_some_and(|i| self.entries[i].count >= self.threshold)
    }

    /// Entries sorted by recency, oldest first.
    pub fn state(&self) -> Vec<RefEntry> {
        let mut v = self.entries.clone();
        v.sort_by_key(|e| e.rank);
        v
    }
}

pub fn table_state(t: &XptTable) -> Vec<RefEntry> {
    t.entries()
        .map(|e| RefEntry {
            page: e.phys_page.0,
            asid: e.asid.0,
            tid: e.tid.0,
            count: e.miss_count,
            rank: e.lru_rank,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Miss { page: u64, asid: u32, tid: u32 },
    Walk { page: u64, asid: u32, tid: u32 },
    Flush(FlushScope),
}

/// Random operation over `pages` pages, 4 address spaces and 3 threads each.
pub fn random_op<R: Rng>(rng: &mut R, pages: u64) -> Op {
    let page = 0x1000 + rng.gen_range(0..pages);
    let asid = rng.gen_range(1..=4);
    let tid = rng.gen_range(1..=3);
    match rng.gen_range(0..100) {
        0..=71 => Op::Miss { page, asid, tid },
        72..=93 => Op::Walk { page, asid, tid },
        94..=97 => Op::Flush(FlushScope::Page(PhysPage(page))),
        98 => Op::Flush(FlushScope::FullAsid(Asid(asid))),
        _ => Op::Flush(FlushScope::Global),
    }
}

/// Applies `ops` to both tables, comparing every result and the full state
/// after every operation. Returns the index of the first divergence.
pub fn first_divergence(cfg: &XptConfig, ops: &[Op]) -> Option<(usize, String)> {
    let mut fast = XptTable::new(cfg.clone()).expect("valid config");
    let mut naive = RefXpt::new(cfg);
    let ctx = |asid, tid| ExecContext::new(0, asid, tid);
    for (i, op) in ops.iter().enumerate() {
        let detail = match *op {
            Op::Miss { page, asid, tid } => {
                let a = fast.on_llc_miss(PhysPage(page), ctx(asid, tid));
                let b = naive.miss(page, asid, tid);
                (a.reason != b || a.triggered != (b == DecisionReason::Triggered))
                    .then(|| format!("decision {a:?} vs {b:?}"))
            }
            Op::Walk { page, asid, tid } => {
                let a = fast.on_page_walk(PhysPage(page), ctx(asid, tid));
                let b = naive.walk(page, asid, tid);
                let a = a.map(|e| (e.phys_page.0, e.asid.0, e.tid.0, e.miss_count, e.lru_rank));
                let b = b.map(|e| (e.page, e.asid, e.tid, e.count, e.rank));
                (a != b).then(|| format!("evicted {a:?} vs {b:?}"))
            }
            Op::Flush(scope) => {
                let a = fast.on_tlb_flush(scope);
                let b = naive.flush(scope);
                (a != b).then(|| format!("flushed {a} vs {b}"))
            }
        };
        if let Some(d) = detail {
            return Some((i, d));
        }
        if fast.len() > cfg.capacity {
            return Some((i, format!("over capacity: {}", fast.len())));
        }
        let (sa, sb) = (table_state(&fast), naive.state());
        if sa != sb {
            return Some((i, format!("state {sa:?} vs {sb:?}")));
        }
        if let Op::Miss { page, .. } | Op::Walk { page, .. } = *op {
            if fast.is_primed(PhysPage(page)) != naive.primed(page) {
                return Some((i, "is_primed differs".into()));
            }
        }
    }
    None
}
