//! Branch trace unit: pattern table, trace cache window and checkpoint table.
//!
//! Entries are indexed by `branch_pc mod sets` and tagged with the full pc.
//! Each entry keeps a window over the cyclic sequence `[e0 .. en-1, EOT]` of
//! its trace. Fetch-time lookups decrement speculative counters in the window,
//! commits advance the checkpoint, and squashes undo lookups youngest first.

use std::collections::{BTreeMap, VecDeque};

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::bundle::BranchRecord;
use crate::element::{CheckpointElement, HintInfo, PatternElement, TraceElement, ENTRY_ELEMENTS};
use crate::trace::Pc;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BtuError {
    #[error("corrupt entry for branch {0:#x}: {1}")]
    CorruptEntry(Pc, String),
    #[error("commit of branch {0:#x} without a matching lookup")]
    CommitWithoutFetch(Pc),
    #[error("squash of branch {0:#x} without an in-flight lookup")]
    MissingCheckpoint(Pc),
    #[error("branch {0:#x} has no trace in memory")]
    NotTraced(Pc),
    #[error("bad trace unit geometry: {0}")]
    Geometry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BtuGeometry {
    pub entries: usize,
    pub ways: usize,
}

impl Default for BtuGeometry {
    fn default() -> Self {
        Self { entries: 16, ways: 1 }
    }
}

impl BtuGeometry {
    pub fn sets(&self) -> usize {
        self.entries / self.ways
    }

    pub fn validate(&self) -> Result<(), BtuError> {
        if self.entries == 0 || self.ways == 0 || !self.entries.is_multiple_of(self.ways) {
            return Err(BtuError::Geometry(format!("{} entries in {}-way sets", self.entries, self.ways)));
        }
        Ok(())
    }
}

/// A trace element in the window with its speculative counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSlot {
    /// Position in the cyclic trace.
    pub pos: usize,
    pub elem: TraceElement,
    pub pattern_left: u16,
    pub trace_left: u16,
}

impl WindowSlot {
    fn fresh(pos: usize, elem: TraceElement) -> Self {
        Self { pos, elem, pattern_left: elem.pattern_counter, trace_left: elem.trace_counter }
    }

    fn exhausted(&self) -> bool {
        self.elem.eot || self.trace_left == 0
    }
}

/// Undo record of one lookup: the slot it decremented and its prior counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Undo {
    seq: u64,
    prev: (u16, u16),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BtuEntry {
    pub tag: Pc,
    pub pat: Vec<PatternElement>,
    pub trc: VecDeque<WindowSlot>,
    pub cpt: CheckpointElement,
    pub lru: u64,
    /// Absolute sequence number of `trc[0]` since the fill.
    base_seq: u64,
    inflight: VecDeque<Undo>,
}

impl BtuEntry {
    /// In-flight lookups keep an entry resident.
    pub fn pinned(&self) -> bool {
        !self.inflight.is_empty()
    }

    pub fn inflight(&self) -> usize {
        self.inflight.len()
    }

    fn corrupt(&self, why: impl Into<String>) -> BtuError {
        BtuError::CorruptEntry(self.tag, why.into())
    }

    fn check(&self, s: &WindowSlot) -> Result<(), BtuError> {
        if s.elem.eot {
            return Ok(());
        }
        let ok = s.pattern_left <= s.elem.pattern_counter
            && s.trace_left <= s.elem.trace_counter
            && (s.trace_left == 0) == (s.pattern_left == 0);
        if ok {
            Ok(())
        } else {
            Err(self.corrupt(format!("slot {} counters ({}, {})", s.pos, s.pattern_left, s.trace_left)))
        }
    }

    /// Target offset of the next outcome of `s`.
    fn offset(&self, s: &WindowSlot) -> Result<i16, BtuError> {
        let consumed = (s.elem.pattern_counter - s.pattern_left) as u32;
        let pat = self
            .pat
            .get(s.elem.pattern_index as usize..s.elem.pattern_index as usize + s.elem.pattern_size as usize)
            .ok_or_else(|| self.corrupt("pattern range outside the table"))?;
        let mut acc = 0u32;
        for p in pat {
            acc += p.reps() as u32;
            if consumed < acc {
                return Ok(p.target_offset());
            }
        }
        Err(self.corrupt("pattern counter beyond pattern length"))
    }
}

/// Result of a fetch-time lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lookup {
    Redirect(Pc),
    Miss,
    Stall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BtuCounters {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub fills: u64,
    pub window_stalls: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fill {
    Filled {
        evicted: Option<Pc>,
    },
    /// Every way of the set is pinned by in-flight lookups.
    Blocked,
    Resident,
}

fn decrement(total: u16, left: (u16, u16)) -> (u16, u16) {
    let (p, t) = left;
    match (p - 1, t) {
        (0, 1) => (0, 0),
        (0, t) => (total, t - 1),
        (p, t) => (p, t),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BtuState {
    pub geometry: BtuGeometry,
    sets: Vec<Vec<BtuEntry>>,
    /// Traces in memory, keyed by branch pc.
    memory: FxHashMap<Pc, BranchRecord>,
    pub spilled: BTreeMap<Pc, CheckpointElement>,
    /// Outstanding fills and the cycle at which each completes.
    pub pending: BTreeMap<Pc, u64>,
    pub counters: BtuCounters,
    clock: u64,
}

impl BtuState {
    pub fn new<'a>(
        geometry: BtuGeometry,
        records: impl IntoIterator<Item = &'a BranchRecord>,
    ) -> Result<Self, BtuError> {
        geometry.validate()?;
        let memory = records.into_iter().filter(|r| !r.is_single_target()).map(|r| (r.branch_pc, r.clone())).collect();
        Ok(Self {
            geometry,
            sets: vec![Vec::new(); geometry.sets()],
            memory,
            spilled: BTreeMap::new(),
            pending: BTreeMap::new(),
            counters: BtuCounters::default(),
            clock: 0,
        })
    }

    fn set_of(&self, pc: Pc) -> usize {
        (pc % self.geometry.sets() as u64) as usize
    }

    pub fn entry(&self, pc: Pc) -> Option<&BtuEntry> {
        self.sets[self.set_of(pc)].iter().find(|e| e.tag == pc)
    }

    fn entry_mut(&mut self, pc: Pc) -> Option<&mut BtuEntry> {
        let s = self.set_of(pc);
        self.sets[s].iter_mut().find(|e| e.tag == pc)
    }

    pub fn resident(&self) -> impl Iterator<Item = &BtuEntry> {
        self.sets.iter().flatten()
    }

    pub fn is_traced(&self, pc: Pc) -> bool {
        self.memory.contains_key(&pc)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Fetch-time lookup. Single-target hints never touch the unit. A miss
    /// schedules a fill completing at `now + fill_latency`.
    pub fn lookup(&mut self, pc: Pc, hint: HintInfo, now: u64, fill_latency: u64) -> Result<Lookup, BtuError> {
        if hint.single_target {
            return Ok(Lookup::Redirect((pc as i64 + hint.field12 as i64) as Pc));
        }
        if !self.memory.contains_key(&pc) {
            return Err(BtuError::NotTraced(pc));
        }
        let stamp = self.tick();
        let Some(e) = self.entry_mut(pc) else {
            if let std::collections::btree_map::Entry::Vacant(e) = self.pending.entry(pc) {
                e.insert(now + fill_latency);
                self.counters.misses += 1;
            }
            return Ok(Lookup::Miss);
        };
        e.lru = stamp;
        let Some(i) = e.trc.iter().position(|s| !s.exhausted()) else {
            self.counters.window_stalls += 1;
            return Ok(Lookup::Stall);
        };
        let s = e.trc[i];
        e.check(&s)?;
        let off = e.offset(&s)?;
        let prev = (s.pattern_left, s.trace_left);
        let (p, t) = decrement(s.elem.pattern_counter, prev);
        e.trc[i].pattern_left = p;
        e.trc[i].trace_left = t;
        e.inflight.push_back(Undo { seq: e.base_seq + i as u64, prev });
        self.counters.hits += 1;
        Ok(Lookup::Redirect((pc as i64 + off as i64) as Pc))
    }

    /// Retires the oldest in-flight lookup of `pc` into the checkpoint. When
    /// the head element is used up it leaves the window and the next element
    /// of the cyclic trace is appended.
    pub fn commit(&mut self, pc: Pc) -> Result<(), BtuError> {
        let trace_len = self.memory.get(&pc).ok_or(BtuError::NotTraced(pc))?.trace.len();
        let e = self.entry_mut(pc).ok_or(BtuError::CommitWithoutFetch(pc))?;
        let u = e.inflight.pop_front().ok_or(BtuError::CommitWithoutFetch(pc))?;
        if u.seq != e.base_seq {
            return Err(e.corrupt(format!("commit of slot {} while head is {}", u.seq, e.base_seq)));
        }
        let head = e.trc[0];
        let (p, t) = decrement(head.elem.pattern_counter, (e.cpt.pattern_counter, e.cpt.trace_counter));
        e.cpt.pattern_counter = p;
        e.cpt.trace_counter = t;
        if t == 0 {
            self.advance_head(pc, trace_len);
        }
        Ok(())
    }

    fn advance_head(&mut self, pc: Pc, trace_len: usize) {
        let trace = &self.memory[&pc].trace;
        let s = self.set_of(pc);
        let e = self.sets[s].iter_mut().find(|e| e.tag == pc).expect("resident");
        loop {
            let old = e.trc.pop_front().expect("non-empty window");
            let last = e.trc.back().map_or(old.pos, |b| b.pos);
            let next = (last + 1) % trace_len;
            e.trc.push_back(WindowSlot::fresh(next, trace[next]));
            e.base_seq += 1;
            if !e.trc[0].elem.eot {
                break;
            }
        }
        let head = e.trc[0];
        e.cpt = CheckpointElement::fresh(head.pos as u16, &head.elem);
        // a lookup may already have consumed part of the new head
        debug_assert!(e.inflight.front().is_none_or(|u| u.seq >= e.base_seq));
    }

    /// Undoes the youngest in-flight lookup of `pc`.
    pub fn squash(&mut self, pc: Pc) -> Result<(), BtuError> {
        let e = self.entry_mut(pc).ok_or(BtuError::MissingCheckpoint(pc))?;
        let u = e.inflight.pop_back().ok_or(BtuError::MissingCheckpoint(pc))?;
        let i = (u.seq - e.base_seq) as usize;
        let slot = e.trc.get_mut(i).ok_or(BtuError::MissingCheckpoint(pc))?;
        (slot.pattern_left, slot.trace_left) = u.prev;
        Ok(())
    }

    /// Squashes a set of lookups given oldest first; they are undone youngest first.
    pub fn squash_all(&mut self, pcs: &[Pc]) -> Result<(), BtuError> {
        pcs.iter().rev().try_for_each(|&pc| self.squash(pc))
    }

    /// Installs `pc`, evicting the least recently used unpinned entry of its
    /// set when the set is full. The victim's checkpoint is spilled.
    pub fn fill(&mut self, pc: Pc) -> Result<Fill, BtuError> {
        if self.entry(pc).is_some() {
            return Ok(Fill::Resident);
        }
        let rec = self.memory.get(&pc).ok_or(BtuError::NotTraced(pc))?;
        let s = self.set_of(pc);
        let mut evicted = None;
        if self.sets[s].len() == self.geometry.ways {
            let Some(v) =
                self.sets[s].iter().enumerate().filter(|(_, e)| !e.pinned()).min_by_key(|(_, e)| e.lru).map(|(i, _)| i)
            else {
                return Ok(Fill::Blocked);
            };
            let victim = self.sets[s].swap_remove(v);
            self.spilled.insert(victim.tag, victim.cpt);
            self.counters.evictions += 1;
            evicted = Some(victim.tag);
        }
        let trace = &rec.trace;
        let cp = self.spilled.get(&pc).copied().unwrap_or_else(|| CheckpointElement::fresh(0, &trace[0]));
        let len = trace.len();
        let window = if len <= ENTRY_ELEMENTS { (ENTRY_ELEMENTS / len) * len } else { ENTRY_ELEMENTS };
        let start = cp.trace_index as usize;
        let mut trc: VecDeque<WindowSlot> =
            (0..window).map(|k| (start + k) % len).map(|i| WindowSlot::fresh(i, trace[i])).collect();
        trc[0].pattern_left = cp.pattern_counter;
        trc[0].trace_left = cp.trace_counter;
        let entry = BtuEntry {
            tag: pc,
            pat: rec.patterns.clone(),
            trc,
            cpt: cp,
            lru: 0,
            base_seq: 0,
            inflight: VecDeque::new(),
        };
        entry.check(&entry.trc[0])?;
        let stamp = self.tick();
        self.sets[s].push(BtuEntry { lru: stamp, ..entry });
        self.counters.fills += 1;
        Ok(Fill::Filled { evicted })
    }

    /// Completes every pending fill due by `now`. Blocked fills stay pending.
    pub fn advance(&mut self, now: u64) -> Result<Vec<(Pc, Fill)>, BtuError> {
        let due: Vec<Pc> = self.pending.iter().filter(|(_, &t)| t <= now).map(|(&pc, _)| pc).collect();
        let mut done = Vec::new();
        for pc in due {
            let f = self.fill(pc)?;
            if f != Fill::Blocked {
                self.pending.remove(&pc);
            }
            done.push((pc, f));
        }
        Ok(done)
    }

    /// Fills traced branches in pc order into free ways, without evicting.
    pub fn preload(&mut self) -> Result<(), BtuError> {
        let mut pcs: Vec<Pc> = self.memory.keys().copied().collect();
        pcs.sort_unstable();
        for pc in pcs {
            if self.sets[self.set_of(pc)].len() < self.geometry.ways {
                self.fill(pc)?;
            }
        }
        self.counters.fills = 0;
        Ok(())
    }
}

/// Replays `n` outcomes of one record through a fresh unit, committing each
/// lookup immediately. Matches the sequential expansion of the trace.
pub fn replay_record(record: &BranchRecord, n: usize) -> Result<Vec<Pc>, BtuError> {
    if let Some(t) = record.single_target_pc() {
        return Ok(vec![t; n]);
    }
    let mut btu = BtuState::new(BtuGeometry { entries: 1, ways: 1 }, [record])?;
    btu.fill(record.branch_pc)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        match btu.lookup(record.branch_pc, record.hint, 0, 0)? {
            Lookup::Redirect(t) => out.push(t),
            other => return Err(BtuError::CorruptEntry(record.branch_pc, format!("replay lookup returned {other:?}"))),
        }
        btu.commit(record.branch_pc)?;
    }
    Ok(out)
}
