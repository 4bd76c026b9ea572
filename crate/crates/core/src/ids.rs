//! Address and identity newtypes shared by every layer.

use std::fmt;

pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;
pub const LINE_SIZE: u64 = 64;
pub const LINES_PER_PAGE: u8 = (PAGE_SIZE / LINE_SIZE) as u8;

/// Physical page number: the physical address shifted right by 12.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PhysPage(pub u64);

impl PhysPage {
    pub fn containing(paddr: u64) -> Self {
        PhysPage(paddr >> PAGE_SHIFT)
    }

    pub fn base_addr(self) -> u64 {
        self.0 << PAGE_SHIFT
    }

    pub fn line_addr(self, line: u8) -> u64 {
        self.base_addr() + u64::from(line) * LINE_SIZE
    }
}

impl fmt::Display for PhysPage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Virtual page number within one address space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VirtPage(pub u64);

impl VirtPage {
    pub fn containing(vaddr: u64) -> Self {
        VirtPage(vaddr >> PAGE_SHIFT)
    }

    pub fn base_addr(self) -> u64 {
        self.0 << PAGE_SHIFT
    }

    /// Virtual address of cache line `line` (0..64) of this page.
    pub fn line_addr(self, line: u8) -> u64 {
        debug_assert!(line < LINES_PER_PAGE);
        self.base_addr() + u64::from(line) * LINE_SIZE
    }

    pub fn offset(self, pages: u64) -> Self {
        VirtPage(self.0 + pages)
    }
}

impl fmt::Display for VirtPage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Asid(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tid(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CoreId(pub u16);

impl fmt::Display for Asid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for Tid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for CoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Thread id used for page walks the OS performs on a process's behalf.
pub const OS_TID: Tid = Tid(u32::MAX);

/// Identity attached to every memory operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ExecContext {
    pub core: CoreId,
    pub asid: Asid,
    pub tid: Tid,
}

impl ExecContext {
    pub const fn new(core: u16, asid: u32, tid: u32) -> Self {
        ExecContext {
            core: CoreId(core),
            asid: Asid(asid),
            tid: Tid(tid),
        }
    }
}

impl fmt::Display for ExecContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "core{}/asid{}/tid{}", self.core, self.asid, self.tid)
    }
}
