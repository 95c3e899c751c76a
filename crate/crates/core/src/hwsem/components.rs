//! Abstract microarchitectural components: cache, trace cache and scheduler.

use serde::{Deserialize, Serialize};

use crate::trace::Pc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Access {
    Hit,
    Miss,
}

/// A cache line tag. Instruction and data addresses live in separate spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Line {
    Insn(Pc),
    Data(u64),
}

/// Fully associative LRU set, least recently used first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LruSet<T> {
    pub capacity: usize,
    pub items: Vec<T>,
}

impl<T: PartialEq + Copy> LruSet<T> {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), items: Vec::new() }
    }

    pub fn access(&self, x: T) -> Access {
        if self.items.contains(&x) {
            Access::Hit
        } else {
            Access::Miss
        }
    }

    /// Marks `x` most recently used, inserting it and evicting the LRU item if needed.
    pub fn update(&mut self, x: T) {
        if let Some(i) = self.items.iter().position(|&y| y == x) {
            self.items.remove(i);
        } else if self.items.len() == self.capacity {
            self.items.remove(0);
        }
        self.items.push(x);
    }
}

pub type Cache = LruSet<Line>;
pub type TraceCache = LruSet<Pc>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Directive {
    Fetch,
    Execute,
    Commit,
}

/// Deterministic scheduler. The next directive is a function of the buffer's
/// structure: commit a resolved head, else execute a ready entry, else fetch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scheduler {
    pub next: Directive,
}

impl Default for Scheduler {
    fn default() -> Self {
        Self { next: Directive::Fetch }
    }
}

impl Scheduler {
    pub fn next(&self) -> Directive {
        self.next
    }

    pub fn update(&self, head_resolved: bool, any_ready: bool) -> Scheduler {
        let next = if head_resolved {
            Directive::Commit
        } else if any_ready {
            Directive::Execute
        } else {
            Directive::Fetch
        };
        Scheduler { next }
    }
}
