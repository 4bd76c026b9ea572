use std::fmt;
use std::io::{self, Write};

use crate::ids::PhysPage;
use crate::mem::LatencyClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceKind {
    Load,
    Train,
    Probe,
    Victim,
    Evict,
    FlushLine,
    TlbFlush,
    Compute,
    SpuriousWalk,
    KeystrokeIpi,
    PacketArrival,
}

impl TraceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::Load => "load",
            TraceKind::Train => "train",
            TraceKind::Probe => "probe",
            TraceKind::Victim => "victim",
            TraceKind::Evict => "evict",
            TraceKind::FlushLine => "flush_line",
            TraceKind::TlbFlush => "tlb_flush",
            TraceKind::Compute => "compute",
            TraceKind::SpuriousWalk => "spurious_walk",
            TraceKind::KeystrokeIpi => "keystroke_ipi",
            TraceKind::PacketArrival => "packet_arrival",
        }
    }

    /// Kinds that perform exactly one memory-hierarchy load.
    pub fn is_access(self) -> bool {
        matches!(
            self,
            TraceKind::Load
                | TraceKind::Train
                | TraceKind::Probe
                | TraceKind::Victim
                | TraceKind::Evict
        )
    }
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `cycle` is the issue cycle; `cost` is what the operation added to the
/// clock. `latency` is the observed latency, which differs from `cost` for
/// overlapped training loads and fixed step overhead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub cycle: u64,
    pub thread: u32,
    pub kind: TraceKind,
    pub vaddr: Option<u64>,
    pub ppage: Option<PhysPage>,
    pub latency: u32,
    pub class: Option<LatencyClass>,
    pub cost: u64,
}

pub const KERNEL_THREAD: u32 = 0;
pub const TRACE_CSV_HEADER: &str = "cycle,thread,kind,vaddr,ppage,latency,class";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventTrace {
    threads: Vec<String>,
    records: Vec<TraceRecord>,
}

impl Default for EventTrace {
    fn default() -> Self {
        EventTrace {
            threads: vec!["kernel".to_string()],
            records: Vec::new(),
        }
    }
}

impl EventTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn register_thread(&mut self, name: &str) -> u32 {
        self.threads.push(name.to_string());
        (self.threads.len() - 1) as u32
    }

    pub(crate) fn push(&mut self, record: TraceRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.cycle <= record.cycle));
        self.records.push(record);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn thread_name(&self, index: u32) -> &str {
        &self.threads[index as usize]
    }

    pub fn thread_index(&self, name: &str) -> Option<u32> {
        self.threads.iter().position(|t| t == name).map(|i| i as u32)
    }

    pub fn records_of<'a>(&'a self, name: &str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        let index = self.thread_index(name);
        self.records
            .iter()
            .filter(move |r| Some(r.thread) == index)
    }

    /// Sum of per-record clock charges.
    pub fn total_cost(&self) -> u64 {
        self.records.iter().map(|r| r.cost).sum()
    }

    /// Appends a later trace, remapping its thread indices.
    pub fn extend(&mut self, other: EventTrace) {
        let map: Vec<u32> = other
            .threads
            .iter()
            .enumerate()
            .map(|(i, name)| {
                if i == 0 {
                    KERNEL_THREAD
                } else {
                    self.register_thread(name)
                }
            })
            .collect();
        for mut r in other.records {
            r.thread = map[r.thread as usize];
            self.push(r);
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{TRACE_CSV_HEADER}")?;
        for r in &self.records {
            write!(out, "{},{},{},", r.cycle, self.thread_name(r.thread), r.kind)?;
            if let Some(v) = r.vaddr {
                write!(out, "{v:#x}")?;
            }
            out.write_all(b",")?;
            if let Some(p) = r.ppage {
                write!(out, "{:#x}", p.0)?;
            }
            write!(out, ",{},", r.latency)?;
            if let Some(c) = r.class {
                write!(out, "{c}")?;
            }
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("trace CSV is ASCII")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows_leave_missing_fields_empty() {
        let mut t = EventTrace::new();
        let idx = t.register_thread("rx");
        t.push(TraceRecord {
            cycle: 7,
            thread: idx,
            kind: TraceKind::FlushLine,
            vaddr: Some(0x1040),
            ppage: None,
            latency: 0,
            class: None,
            cost: 5,
        });
        assert_eq!(
            t.to_csv_string(),
            "cycle,thread,kind,vaddr,ppage,latency,class\n7,rx,flush_line,0x1040,,0,\n"
        );
    }

    #[test]
    fn extend_remaps_threads() {
        let mut a = EventTrace::new();
        a.register_thread("x");
        let mut b = EventTrace::new();
        let y = b.register_thread("y");
        b.push(TraceRecord {
            cycle: 1,
            thread: y,
            kind: TraceKind::Compute,
            vaddr: None,
            ppage: None,
            latency: 0,
            class: None,
            cost: 6,
        });
        a.extend(b);
        assert_eq!(a.thread_name(a.records()[0].thread), "y");
        assert_eq!(a.records_of("y").count(), 1);
    }
}
