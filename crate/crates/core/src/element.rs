//! Fixed-width elements held by the branch trace unit and their bit packing.
//!
//! | element          | packed width |
//! |------------------|--------------|
//! | pattern element  | 20 bits: 12-bit signed target offset, 8-bit repetitions |
//! | trace element    | 41 bits: eot flag, 4-bit index, 4-bit size-1, 16-bit pattern counter, 16-bit trace counter |
//! | hint             | 14 bits: single-target mark, 12-bit signed field, short-trace mark |

use serde::{Deserialize, Serialize};

use crate::error::{Result, TraceError};

/// Elements per pattern-table entry and per trace-cache entry.
pub const ENTRY_ELEMENTS: usize = 16;
pub const MAX_REPS: u64 = 255;
pub const OFFSET_MIN: i64 = -2048;
pub const OFFSET_MAX: i64 = 2047;

pub const PATTERN_ELEMENT_BITS: u32 = 20;
pub const TRACE_ELEMENT_BITS: u32 = 41;
pub const TRACE_ELEMENT_BYTES: usize = 6;
pub const HINT_BITS: u32 = 14;

fn check_offset(offset: i64) -> Result<i16> {
    if (OFFSET_MIN..=OFFSET_MAX).contains(&offset) {
        Ok(offset as i16)
    } else {
        Err(TraceError::OffsetOverflow(offset))
    }
}

fn sign_extend_12(v: u32) -> i16 {
    (((v & 0xfff) << 20) as i32 >> 20) as i16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatternElement {
    target_offset: i16,
    reps: u8,
}

impl PatternElement {
    pub fn new(target_offset: i64, reps: u8) -> Result<Self> {
        if reps == 0 {
            return Err(TraceError::MalformedBundle("pattern element with zero repetitions".into()));
        }
        Ok(Self { target_offset: check_offset(target_offset)?, reps })
    }

    pub fn target_offset(self) -> i16 {
        self.target_offset
    }

    pub fn reps(self) -> u8 {
        self.reps
    }

    pub fn pack(self) -> u32 {
        ((self.target_offset as u32 & 0xfff) << 8) | self.reps as u32
    }

    pub fn unpack(v: u32) -> Result<Self> {
        if v >> PATTERN_ELEMENT_BITS != 0 {
            return Err(TraceError::MalformedBundle(format!("pattern element {v:#x} wider than 20 bits")));
        }
        Self::new(sign_extend_12(v >> 8) as i64, (v & 0xff) as u8)
    }
}

/// Splits a repetition count into 8-bit chunks that share one target offset.
pub fn split_overflow(target_offset: i16, count: u64) -> Vec<PatternElement> {
    debug_assert!(count >= 1);
    let full = count / MAX_REPS;
    let rest = count % MAX_REPS;
    let mut out = Vec::with_capacity((full + (rest > 0) as u64) as usize);
    for _ in 0..full {
        out.push(PatternElement { target_offset, reps: MAX_REPS as u8 });
    }
    if rest > 0 {
        out.push(PatternElement { target_offset, reps: rest as u8 });
    }
    out
}

/// Location of a pattern inside the compacted pattern store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatternSlot {
    pub index: u8,
    pub size: u8,
}

fn find_sub(haystack: &[PatternElement], needle: &[PatternElement]) -> Option<usize> {
    if needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

fn greedy_superstring(patterns: &[&[PatternElement]]) -> Vec<PatternElement> {
    let mut store: Vec<PatternElement> = Vec::new();
    for p in patterns {
        if find_sub(&store, p).is_some() {
            continue;
        }
        let max_overlap = p.len().min(store.len());
        let overlap = (1..=max_overlap).rev().find(|&o| store[store.len() - o..] == p[..o]).unwrap_or(0);
        store.extend_from_slice(&p[overlap..]);
    }
    store
}

/// Packs pattern element sequences into one shared store, reusing any pattern
/// that already occurs in the store and merging suffix/prefix overlaps.
///
/// Patterns are merged greedily in input order. If that does not fit, a
/// second pass merges them longest-first before giving up.
pub fn compact_pattern_store(patterns: &[Vec<PatternElement>]) -> Result<(Vec<PatternElement>, Vec<PatternSlot>)> {
    let in_order: Vec<&[PatternElement]> = patterns.iter().map(Vec::as_slice).collect();
    let mut store = greedy_superstring(&in_order);
    if store.len() > ENTRY_ELEMENTS {
        let mut by_len = in_order.clone();
        by_len.sort_by_key(|p| std::cmp::Reverse(p.len()));
        let alt = greedy_superstring(&by_len);
        if alt.len() < store.len() {
            store = alt;
        }
    }
    if store.len() > ENTRY_ELEMENTS {
        return Err(TraceError::CapacityExceeded { needed: store.len(), capacity: ENTRY_ELEMENTS });
    }
    let slots = patterns
        .iter()
        .map(|p| {
            let index = find_sub(&store, p).expect("pattern was merged into the store");
            PatternSlot { index: index as u8, size: p.len() as u8 }
        })
        .collect();
    Ok((store, slots))
}

/// One element of a branch trace. An end-of-trace marker carries no payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceElement {
    pub pattern_index: u8,
    pub pattern_size: u8,
    pub pattern_counter: u16,
    pub trace_counter: u16,
    pub eot: bool,
}

impl TraceElement {
    pub const EOT: TraceElement =
        TraceElement { pattern_index: 0, pattern_size: 0, pattern_counter: 0, trace_counter: 0, eot: true };

    pub fn new(slot: PatternSlot, pattern_counter: u16, trace_counter: u16) -> Self {
        Self { pattern_index: slot.index, pattern_size: slot.size, pattern_counter, trace_counter, eot: false }
    }

    pub fn slot(&self) -> PatternSlot {
        PatternSlot { index: self.pattern_index, size: self.pattern_size }
    }

    /// Structural check; `store_len` bounds the referenced pattern range.
    pub fn validate(&self, store: &[PatternElement]) -> Result<()> {
        let bad = |why: &str| Err(TraceError::MalformedBundle(format!("trace element {self:?}: {why}")));
        if self.eot {
            if *self != Self::EOT {
                return bad("end-of-trace marker with payload");
            }
            return Ok(());
        }
        if self.pattern_size == 0 || self.pattern_size as usize > ENTRY_ELEMENTS {
            return bad("pattern size out of range");
        }
        let end = self.pattern_index as usize + self.pattern_size as usize;
        if end > store.len() {
            return bad("pattern range outside the store");
        }
        if self.trace_counter == 0 || self.pattern_counter == 0 {
            return bad("zero counter");
        }
        let reps: u32 = store[self.pattern_index as usize..end].iter().map(|p| p.reps as u32).sum();
        if self.pattern_counter as u32 > reps {
            return bad("pattern counter exceeds pattern repetitions");
        }
        Ok(())
    }

    pub fn pack(&self) -> u64 {
        if self.eot {
            return 1 << 40;
        }
        ((self.pattern_index as u64 & 0xf) << 36)
            | (((self.pattern_size as u64).wrapping_sub(1) & 0xf) << 32)
            | ((self.pattern_counter as u64) << 16)
            | self.trace_counter as u64
    }

    pub fn unpack(v: u64) -> Result<Self> {
        if v >> TRACE_ELEMENT_BITS != 0 {
            return Err(TraceError::MalformedBundle(format!("trace element {v:#x} wider than 41 bits")));
        }
        if v >> 40 == 1 {
            if v != 1 << 40 {
                return Err(TraceError::MalformedBundle("end-of-trace marker with payload".into()));
            }
            return Ok(Self::EOT);
        }
        Ok(Self {
            pattern_index: ((v >> 36) & 0xf) as u8,
            pattern_size: ((v >> 32) & 0xf) as u8 + 1,
            pattern_counter: (v >> 16) as u16,
            trace_counter: v as u16,
            eot: false,
        })
    }
}

/// Committed progress of a branch through its trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct CheckpointElement {
    /// Position of the head element in the cyclic trace.
    pub trace_index: u16,
    pub pattern_counter: u16,
    pub trace_counter: u16,
    /// Counters of the head element as loaded.
    pub head_original: (u16, u16),
}

impl CheckpointElement {
    pub fn fresh(trace_index: u16, head: &TraceElement) -> Self {
        Self {
            trace_index,
            pattern_counter: head.pattern_counter,
            trace_counter: head.trace_counter,
            head_original: (head.pattern_counter, head.trace_counter),
        }
    }
}

/// Per-branch hint embedded alongside the code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HintInfo {
    pub single_target: bool,
    /// Target offset for single-target branches, otherwise the trace offset.
    pub field12: i16,
    pub short_trace: bool,
}

impl HintInfo {
    pub fn single_target(offset: i64) -> Result<Self> {
        Ok(Self { single_target: true, field12: check_offset(offset)?, short_trace: false })
    }

    pub fn multi_target(delta: i64, short_trace: bool) -> Result<Self> {
        Ok(Self { single_target: false, field12: check_offset(delta)?, short_trace })
    }
}

pub fn encode_hint(h: HintInfo) -> Result<u16> {
    if h.single_target && h.short_trace {
        return Err(TraceError::InvalidHint((1 << 13) | ((h.field12 as u16 & 0xfff) << 1) | 1));
    }
    check_offset(h.field12 as i64)?;
    Ok(((h.single_target as u16) << 13) | ((h.field12 as u16 & 0xfff) << 1) | h.short_trace as u16)
}

pub fn decode_hint(v: u16) -> Result<HintInfo> {
    if v >> HINT_BITS != 0 {
        return Err(TraceError::InvalidHint(v));
    }
    let single_target = v >> 13 & 1 == 1;
    let short_trace = v & 1 == 1;
    if single_target && short_trace {
        return Err(TraceError::InvalidHint(v));
    }
    Ok(HintInfo { single_target, field12: sign_extend_12((v >> 1) as u32), short_trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pe(off: i64, reps: u8) -> PatternElement {
        PatternElement::new(off, reps).unwrap()
    }

    #[test]
    fn split_overflow_examples() {
        assert_eq!(split_overflow(7, 300), vec![pe(7, 255), pe(7, 45)]);
        assert_eq!(split_overflow(-3, 1), vec![pe(-3, 1)]);
        assert_eq!(split_overflow(2, 510), vec![pe(2, 255), pe(2, 255)]);
        assert_eq!(split_overflow(2, 255), vec![pe(2, 255)]);
    }

    #[test]
    fn offsets_outside_12_bits_are_rejected() {
        assert!(PatternElement::new(2047, 1).is_ok());
        assert!(PatternElement::new(-2048, 1).is_ok());
        assert_eq!(PatternElement::new(2048, 1), Err(TraceError::OffsetOverflow(2048)));
        assert_eq!(HintInfo::single_target(-2049), Err(TraceError::OffsetOverflow(-2049)));
    }

    #[test]
    fn compact_store_merges_overlaps() {
        let (a, c, t) = (pe(1, 1), pe(2, 1), pe(3, 1));
        let (store, slots) = compact_pattern_store(&[vec![a, c, t], vec![c, t, a]]).unwrap();
        assert_eq!(store, vec![a, c, t, a]);
        assert_eq!(slots, vec![PatternSlot { index: 0, size: 3 }, PatternSlot { index: 1, size: 3 }]);

        let g = pe(-4, 9);
        let (store, slots) = compact_pattern_store(&[vec![g]]).unwrap();
        assert_eq!(store, vec![g]);
        assert_eq!(slots, vec![PatternSlot { index: 0, size: 1 }]);

        let (b,) = (pe(5, 2),);
        let (store, slots) = compact_pattern_store(&[vec![a, b], vec![b, a], vec![a, b]]).unwrap();
        assert_eq!(store, vec![a, b, a]);
        assert_eq!(slots[0], PatternSlot { index: 0, size: 2 });
        assert_eq!(slots[1], PatternSlot { index: 1, size: 2 });
        assert_eq!(slots[2], PatternSlot { index: 0, size: 2 });
    }

    #[test]
    fn compact_store_capacity() {
        let many: Vec<Vec<PatternElement>> = (0..17).map(|i| vec![pe(i, 1)]).collect();
        assert_eq!(compact_pattern_store(&many), Err(TraceError::CapacityExceeded { needed: 17, capacity: 16 }));
        let exactly: Vec<Vec<PatternElement>> = (0..16).map(|i| vec![pe(i, 1)]).collect();
        assert_eq!(compact_pattern_store(&exactly).unwrap().0.len(), 16);
    }

    #[test]
    fn hint_examples() {
        let h = HintInfo::single_target(5).unwrap();
        assert_eq!(encode_hint(h).unwrap(), (1 << 13) | (5 << 1));
        let h = HintInfo::multi_target(0, true).unwrap();
        assert_eq!(encode_hint(h).unwrap(), 1);
        let bad = HintInfo { single_target: true, field12: 0, short_trace: true };
        assert!(matches!(encode_hint(bad), Err(TraceError::InvalidHint(_))));
        assert!(matches!(decode_hint(1 << 14), Err(TraceError::InvalidHint(_))));
    }

    #[test]
    fn hint_exhaustive_14_bit_domain() {
        let mut valid = 0;
        for v in 0..(1u16 << 14) {
            match decode_hint(v) {
                Ok(h) => {
                    valid += 1;
                    assert_eq!(encode_hint(h).unwrap(), v);
                }
                Err(TraceError::InvalidHint(_)) => assert_eq!(v & (1 << 13 | 1), 1 << 13 | 1),
                Err(e) => panic!("unexpected {e}"),
            }
        }
        // A quarter of the domain sets both marks.
        assert_eq!(valid, 3 << 12);
    }

    #[test]
    fn pattern_element_is_20_bits() {
        for (off, reps) in [(-2048, 255), (2047, 1), (0, 128), (-1, 255)] {
            let packed = pe(off, reps).pack();
            assert!(packed < 1 << 20);
            assert_eq!(PatternElement::unpack(packed).unwrap(), pe(off, reps));
        }
        assert_eq!(pe(-1, 255).pack(), 0xfffff);
        assert!(PatternElement::unpack(1 << 20).is_err());
        assert!(PatternElement::unpack(0x00100).is_err(), "zero reps");
    }

    #[test]
    fn trace_element_packing() {
        let e = TraceElement::new(PatternSlot { index: 15, size: 16 }, 4080, 65535);
        assert!(e.pack() < 1 << 41);
        assert_eq!(TraceElement::unpack(e.pack()).unwrap(), e);
        assert_eq!(TraceElement::unpack(TraceElement::EOT.pack()).unwrap(), TraceElement::EOT);
        assert!(TraceElement::unpack((1 << 40) | 3).is_err());
    }

    #[test]
    fn trace_element_validation() {
        let store = vec![pe(1, 2), pe(2, 5)];
        let ok = TraceElement::new(PatternSlot { index: 0, size: 2 }, 7, 2);
        assert!(ok.validate(&store).is_ok());
        let over = TraceElement::new(PatternSlot { index: 0, size: 2 }, 8, 2);
        assert!(over.validate(&store).is_err());
        let outside = TraceElement::new(PatternSlot { index: 1, size: 2 }, 1, 1);
        assert!(outside.validate(&store).is_err());
    }
}
