use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::MemError;
use crate::ids::{Asid, PhysPage, VirtPage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PageSize {
    Size4K,
    Size2M,
    Size1G,
}

impl PageSize {
    /// Number of 4 KiB pages covered.
    pub fn pages(self) -> u64 {
        match self {
            PageSize::Size4K => 1,
            PageSize::Size2M => 512,
            PageSize::Size1G => 512 * 512,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PageSize::Size4K => "4KiB",
            PageSize::Size2M => "2MiB",
            PageSize::Size1G => "1GiB",
        }
    }
}

/// One OS mapping. `vpage` and `ppage` are the first 4 KiB page of the
/// mapping; huge mappings are aligned on both sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageMapping {
    pub vpage: VirtPage,
    pub ppage: PhysPage,
    pub asid: Asid,
    pub size: PageSize,
    pub shared: bool,
    pub locked: bool,
}

impl PageMapping {
    pub fn covers(&self, vpage: VirtPage) -> bool {
        vpage.0 >= self.vpage.0 && vpage.0 < self.vpage.0 + self.size.pages()
    }

    pub fn translate(&self, vpage: VirtPage) -> PhysPage {
        debug_assert!(self.covers(vpage));
        PhysPage(self.ppage.0 + (vpage.0 - self.vpage.0))
    }
}

#[derive(Debug, Clone, Default)]
pub struct PageTable {
    maps: BTreeMap<(Asid, VirtPage), PageMapping>,
}

impl PageTable {
    pub fn lookup(&self, asid: Asid, vpage: VirtPage) -> Option<&PageMapping> {
        self.maps
            .range(..=(asid, vpage))
            .next_back()
            .map(|(_, m)| m)
            .filter(|m| m.asid == asid && m.covers(vpage))
    }

    /// Whether no mapping of `asid` covers any page of `[vpage, vpage + pages)`.
    pub fn range_is_free(&self, asid: Asid, vpage: VirtPage, pages: u64) -> bool {
        let end = VirtPage(vpage.0 + pages);
        self.lookup(asid, vpage).is_none()
            && self.maps.range((asid, vpage)..(asid, end)).next().is_none()
    }

    /// Fails without side effects if any covered page is already mapped.
    pub fn insert(&mut self, mapping: PageMapping) -> Result<(), MemError> {
        if !self.range_is_free(mapping.asid, mapping.vpage, mapping.size.pages()) {
            return Err(MemError::AlreadyMapped {
                asid: mapping.asid,
                vpage: mapping.vpage,
            });
        }
        self.maps.insert((mapping.asid, mapping.vpage), mapping);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PageMapping> + '_ {
        self.maps.values()
    }

    /// `asid vpage ppage size shared locked`, ordered by (asid, vpage).
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for m in self.iter() {
            let _ = writeln!(
                out,
                "{} {:#x} {:#x} {} {} {}",
                m.asid,
                m.vpage.0,
                m.ppage.0,
                m.size.label(),
                u8::from(m.shared),
                u8::from(m.locked)
            );
        }
        out
    }
}
