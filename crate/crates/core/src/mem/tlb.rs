use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use super::page_table::{PageMapping, PageSize};
use crate::ids::{Asid, PhysPage, VirtPage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct TlbKey {
    asid: Asid,
    vbase: VirtPage,
    size: PageSize,
}

#[derive(Debug, Clone, Copy)]
struct TlbSlot {
    pbase: PhysPage,
    stamp: u64,
}

/// Per-core, ASID-tagged translation cache with LRU replacement. One entry
/// caches one whole mapping, huge pages included.
#[derive(Debug, Clone)]
pub struct Tlb {
    capacity: usize,
    slots: HashMap<TlbKey, TlbSlot>,
    lru: BTreeMap<u64, TlbKey>,
    clock: u64,
}

const SIZES: [PageSize; 3] = [PageSize::Size4K, PageSize::Size2M, PageSize::Size1G];

impl Tlb {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "TLB capacity must be positive");
        Tlb {
            capacity,
            slots: HashMap::new(),
            lru: BTreeMap::new(),
            clock: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn covering_key(&self, asid: Asid, vpage: VirtPage) -> Option<TlbKey> {
        SIZES
            .into_iter()
            .map(|size| TlbKey {
                asid,
                vbase: VirtPage(vpage.0 - vpage.0 % size.pages()),
                size,
            })
            .find(|k| self.slots.contains_key(k))
    }

    /// Translates and refreshes recency on a hit.
    pub fn lookup(&mut self, asid: Asid, vpage: VirtPage) -> Option<PhysPage> {
        let key = self.covering_key(asid, vpage)?;
        self.clock += 1;
        let stamp = self.clock;
        let slot = self.slots.get_mut(&key)?;
        self.lru.remove(&slot.stamp);
        slot.stamp = stamp;
        self.lru.insert(stamp, key);
        Some(PhysPage(slot.pbase.0 + (vpage.0 - key.vbase.0)))
    }

    /// Non-mutating residency check.
    pub fn holds(&self, asid: Asid, vpage: VirtPage) -> bool {
        self.covering_key(asid, vpage).is_some()
    }

    pub fn insert(&mut self, mapping: &PageMapping) {
        let key = TlbKey {
            asid: mapping.asid,
            vbase: mapping.vpage,
            size: mapping.size,
        };
        if let Some(old) = self.slots.remove(&key) {
            self.lru.remove(&old.stamp);
        } else if self.slots.len() >= self.capacity {
            if let Some((_, victim)) = self.lru.pop_first() {
                self.slots.remove(&victim);
            }
        }
        self.clock += 1;
        self.slots.insert(
            key,
            TlbSlot {
                pbase: mapping.ppage,
                stamp: self.clock,
            },
        );
        self.lru.insert(self.clock, key);
    }

    pub fn invalidate_page(&mut self, asid: Asid, vpage: VirtPage) -> bool {
        match self.covering_key(asid, vpage) {
            Some(key) => {
                let slot = self.slots.remove(&key).expect("covering key is resident");
                self.lru.remove(&slot.stamp);
                true
            }
            None => false,
        }
    }

    pub fn invalidate_asid(&mut self, asid: Asid) -> usize {
        let before = self.slots.len();
        self.slots.retain(|k, _| k.asid != asid);
        self.lru.retain(|_, k| k.asid != asid);
        before - self.slots.len()
    }

    pub fn clear(&mut self) {
        self.slots.clear();
        self.lru.clear();
    }

    /// `asid vpage ppage size lru_stamp` in LRU order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (stamp, key) in &self.lru {
            let slot = &self.slots[key];
            let _ = writeln!(
                out,
                "{} {:#x} {:#x} {} {}",
                key.asid,
                key.vbase.0,
                slot.pbase.0,
                key.size.label(),
                stamp
            );
        }
        out
    }
}
