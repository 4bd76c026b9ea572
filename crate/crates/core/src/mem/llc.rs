use std::collections::{HashMap, VecDeque};

use crate::ids::LINE_SIZE;

/// Presence set of 64-byte physical lines. When full, the oldest fill is
/// dropped.
#[derive(Debug, Clone)]
pub struct LlcModel {
    capacity: usize,
    present: HashMap<u64, u64>,
    fills: VecDeque<(u64, u64)>,
    generation: u64,
}

impl LlcModel {
    pub fn new(capacity_lines: usize) -> Self {
        assert!(capacity_lines > 0, "LLC capacity must be positive");
        LlcModel {
            capacity: capacity_lines,
            present: HashMap::new(),
            fills: VecDeque::new(),
            generation: 0,
        }
    }

    fn line(paddr: u64) -> u64 {
        paddr & !(LINE_SIZE - 1)
    }

    pub fn contains(&self, paddr: u64) -> bool {
        self.present.contains_key(&Self::line(paddr))
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn fill(&mut self, paddr: u64) {
        let line = Self::line(paddr);
        if self.present.contains_key(&line) {
            return;
        }
        while self.present.len() >= self.capacity {
            let (old, generation) = self.fills.pop_front().expect("fill queue tracks presence");
            if self.present.get(&old) == Some(&generation) {
                self.present.remove(&old);
            }
        }
        self.generation += 1;
        self.present.insert(line, self.generation);
        self.fills.push_back((line, self.generation));
        // Flushed lines leave stale queue slots; compact when they dominate.
        if self.fills.len() > 2 * self.present.len() + 64 {
            let present = &self.present;
            self.fills.retain(|(l, g)| present.get(l) == Some(g));
        }
    }

    /// Returns whether the line was present.
    pub fn flush(&mut self, paddr: u64) -> bool {
        self.present.remove(&Self::line(paddr)).is_some()
    }
}
