//! Raw → vanilla → DNA → k-mers trace compression.
//!
//! The k-mers stage repeatedly picks the repeating k-mer with the highest
//! coverage (`k × non-overlapping frequency / len`) over every `k` in
//! `2..=max_k`, replaces its occurrences by a fresh symbol, and stops when the
//! sequence no longer shrinks or `max_k` patterns were created.

use std::collections::BTreeMap;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::element::{compact_pattern_store, split_overflow, PatternElement, TraceElement, MAX_REPS};
use crate::error::{Result, TraceError};
use crate::trace::{DnaSequence, KmersRepresentation, Pattern, RawTrace, Symbol, VanillaElement, VanillaTrace};

pub const DEFAULT_MAX_K: usize = 16;

pub fn to_vanilla(raw: &RawTrace) -> Result<VanillaTrace> {
    if raw.outcomes.is_empty() {
        return Err(TraceError::EmptyTrace);
    }
    let mut elements: Vec<VanillaElement> = Vec::new();
    for &t in &raw.outcomes {
        match elements.last_mut() {
            Some(e) if e.target_pc == t => e.count += 1,
            _ => elements.push(VanillaElement::new(t, 1)),
        }
    }
    Ok(VanillaTrace::new(raw.branch_pc, elements))
}

/// Assigns one symbol per distinct `(target, count)` pair in first-appearance order.
pub fn to_dna(v: &VanillaTrace) -> DnaSequence {
    let mut ids: FxHashMap<VanillaElement, Symbol> = FxHashMap::default();
    let mut symbol_map = Vec::new();
    let symbols = v
        .elements
        .iter()
        .map(|e| {
            *ids.entry(*e).or_insert_with(|| {
                symbol_map.push(*e);
                Symbol(symbol_map.len() as u32 - 1)
            })
        })
        .collect();
    DnaSequence { branch_pc: v.branch_pc, symbols, symbol_map }
}

/// Non-overlapping occurrence counts of every distinct k-mer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KmerFrequencyMap {
    pub k: usize,
    pub entries: BTreeMap<Vec<Symbol>, usize>,
}

/// Coverage of a candidate k-mer as the exact fraction `weight / len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    pub weight: usize,
    pub len: usize,
}

impl Coverage {
    pub fn value(self) -> f64 {
        self.weight as f64 / self.len as f64
    }
}

pub type CoverageMap = BTreeMap<Vec<Symbol>, Coverage>;

/// Scans windows left to right, counting an occurrence only if it does not
/// overlap the previous counted occurrence of the same k-mer. Returns each
/// distinct window with its count.
fn count_windows(seq: &[Symbol], k: usize) -> Vec<(&[Symbol], usize)> {
    if k <= 16 && seq.iter().all(|s| s.0 < 256) {
        return count_packed(seq, k);
    }
    let mut map: FxHashMap<&[Symbol], (usize, usize)> =
        FxHashMap::with_capacity_and_hasher(seq.len().min(1 << 16), Default::default());
    for (i, w) in seq.windows(k).enumerate() {
        let slot = map.entry(w).or_insert((0, 0));
        if i >= slot.1 {
            slot.0 += 1;
            slot.1 = i + k;
        }
    }
    map.into_iter().map(|(w, (n, _))| (w, n)).collect()
}

/// [`count_windows`] for byte-sized symbols, keying each window by its
/// symbols packed into a `u128`.
fn count_packed(seq: &[Symbol], k: usize) -> Vec<(&[Symbol], usize)> {
    let mask = if k == 16 { u128::MAX } else { (1u128 << (8 * k)) - 1 };
    // count, first free index, first occurrence
    let mut map: FxHashMap<u128, (usize, usize, usize)> =
        FxHashMap::with_capacity_and_hasher(seq.len().min(1 << 16), Default::default());
    let mut key = 0u128;
    for (j, s) in seq.iter().enumerate() {
        key = ((key << 8) | s.0 as u128) & mask;
        if j + 1 < k {
            continue;
        }
        let i = j + 1 - k;
        let slot = map.entry(key).or_insert((0, 0, i));
        if i >= slot.1 {
            slot.0 += 1;
            slot.1 = i + k;
        }
    }
    map.into_values().map(|(n, _, first)| (&seq[first..first + k], n)).collect()
}

pub fn count_kmers(seq: &[Symbol], k: usize) -> Result<KmerFrequencyMap> {
    if k > seq.len() {
        return Err(TraceError::KTooLarge { k, len: seq.len() });
    }
    let entries = count_windows(seq, k).into_iter().map(|(w, n)| (w.to_vec(), n)).collect();
    Ok(KmerFrequencyMap { k, entries })
}

/// A k-mer eligible for replacement in the current round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub kmer: Vec<Symbol>,
    pub freq: usize,
    pub coverage: Coverage,
}

impl Candidate {
    /// Higher coverage first, then smaller k, then the lexicographically
    /// smaller k-mer.
    fn beats(&self, other: &Candidate) -> bool {
        (other.coverage.weight, std::cmp::Reverse(other.kmer.len()), std::cmp::Reverse(&other.kmer))
            < (self.coverage.weight, std::cmp::Reverse(self.kmer.len()), std::cmp::Reverse(&self.kmer))
    }
}

/// Every k-mer with frequency above one, expanded size within `max_k`, and at
/// least two distinct symbols. Runs of a single symbol are left to the trace
/// counter.
pub fn candidates(seq: &[Symbol], max_k: usize, expanded_len: &[usize]) -> Vec<Candidate> {
    let mut out = Vec::new();
    for k in 2..=max_k.min(seq.len()) {
        let counts = count_windows(seq, k);
        let mut any_repeat = false;
        for (w, freq) in counts {
            if freq < 2 {
                continue;
            }
            any_repeat = true;
            if w.iter().all(|&s| s == w[0]) {
                continue;
            }
            let size: usize = w.iter().map(|s| expanded_len[s.index()]).sum();
            if size > max_k {
                continue;
            }
            out.push(Candidate { kmer: w.to_vec(), freq, coverage: Coverage { weight: k * freq, len: seq.len() } });
        }
        // A repeated (k+1)-mer implies a repeated k-mer prefix.
        if !any_repeat {
            break;
        }
    }
    out
}

pub fn coverage_map(seq: &[Symbol], max_k: usize, expanded_len: &[usize]) -> CoverageMap {
    candidates(seq, max_k, expanded_len).into_iter().map(|c| (c.kmer, c.coverage)).collect()
}

/// Same choice as reducing [`candidates`] with [`Candidate::beats`], without
/// materializing the losers.
fn best_candidate(seq: &[Symbol], max_k: usize, expanded_len: &[usize]) -> Option<Candidate> {
    let mut best: Option<(usize, &[Symbol], usize)> = None;
    for k in 2..=max_k.min(seq.len()) {
        let counts = count_windows(seq, k);
        let mut any_repeat = false;
        for (w, freq) in counts {
            if freq < 2 {
                continue;
            }
            any_repeat = true;
            if w.iter().all(|&s| s == w[0]) {
                continue;
            }
            if w.iter().map(|s| expanded_len[s.index()]).sum::<usize>() > max_k {
                continue;
            }
            let weight = k * freq;
            let wins = best.is_none_or(|(bw, bk, _)| {
                (bw, std::cmp::Reverse(bk.len()), std::cmp::Reverse(bk))
                    < (weight, std::cmp::Reverse(k), std::cmp::Reverse(w))
            });
            if wins {
                best = Some((weight, w, freq));
            }
        }
        if !any_repeat {
            break;
        }
    }
    best.map(|(weight, w, freq)| Candidate { kmer: w.to_vec(), freq, coverage: Coverage { weight, len: seq.len() } })
}

/// Replaces non-overlapping occurrences of `kmer`, scanning left to right.
pub fn replace_occurrences(seq: &[Symbol], kmer: &[Symbol], letter: Symbol) -> Vec<Symbol> {
    let k = kmer.len();
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + k <= seq.len() && seq[i..i + k] == *kmer {
            out.push(letter);
            i += k;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

/// One replacement round, recorded for inspection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionStep {
    pub selected: Candidate,
    pub letter: Symbol,
    pub len_before: usize,
    pub len_after: usize,
    /// Every candidate that competed in this round.
    pub competitors: Vec<Candidate>,
}

pub fn kmers_compress(seq: &DnaSequence, max_k: usize) -> KmersRepresentation {
    compress_inner(seq, max_k, false).0
}

/// Like [`kmers_compress`] but also returns every replacement round.
pub fn kmers_compress_logged(seq: &DnaSequence, max_k: usize) -> (KmersRepresentation, Vec<CompressionStep>) {
    compress_inner(seq, max_k, true)
}

fn compress_inner(dna: &DnaSequence, max_k: usize, log: bool) -> (KmersRepresentation, Vec<CompressionStep>) {
    let max_k = max_k.max(2);
    let base = dna.symbol_map.len();
    let mut seq = dna.symbols.clone();
    let mut expanded_len = vec![1usize; base];
    let mut patterns: Vec<Pattern> = Vec::new();
    let mut steps = Vec::new();
    let mut current_len = usize::MAX;
    while seq.len() < current_len && patterns.len() < max_k {
        current_len = seq.len();
        let competitors = if log { candidates(&seq, max_k, &expanded_len) } else { Vec::new() };
        let best = if log {
            competitors.iter().cloned().reduce(|best, c| if c.beats(&best) { c } else { best })
        } else {
            best_candidate(&seq, max_k, &expanded_len)
        };
        let Some(best) = best else { break };
        let letter = Symbol((base + patterns.len()) as u32);
        let size = best.kmer.iter().map(|s| expanded_len[s.index()]).sum();
        expanded_len.push(size);
        let next = replace_occurrences(&seq, &best.kmer, letter);
        patterns.push(Pattern { id: letter, body: best.kmer.clone() });
        if log {
            steps.push(CompressionStep {
                selected: best,
                letter,
                len_before: seq.len(),
                len_after: next.len(),
                competitors,
            });
        }
        seq = next;
    }
    let rep =
        KmersRepresentation { branch_pc: dna.branch_pc, k_trace: seq, patterns, symbol_map: dna.symbol_map.clone() };
    (rep, steps)
}

/// Expands a representation back to its vanilla trace.
pub fn decompress(rep: &KmersRepresentation) -> Result<VanillaTrace> {
    let symbols = rep.expand()?;
    let elements = symbols
        .into_iter()
        .map(|s| rep.symbol_map.get(s.index()).copied().ok_or(TraceError::DanglingSymbol(s.0)))
        .collect::<Result<_>>()?;
    Ok(VanillaTrace::new(rep.branch_pc, elements))
}

/// Convenience: raw trace through the whole pipeline.
pub fn compress_raw(raw: &RawTrace, max_k: usize) -> Result<KmersRepresentation> {
    Ok(kmers_compress(&to_dna(&to_vanilla(raw)?), max_k))
}

/// Hardware form of one branch: the compacted pattern store and the trace
/// element list ending in an end-of-trace marker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLayout {
    pub patterns: Vec<PatternElement>,
    pub trace: Vec<TraceElement>,
}

fn checked_u16(what: &'static str, value: u64) -> Result<u16> {
    u16::try_from(value).map_err(|_| TraceError::CounterOverflow { what, value })
}

/// Collapses runs of equal symbols in `K` into trace elements and packs the
/// referenced patterns into one store.
///
/// A run of a base symbol whose count exceeds one pattern element becomes a
/// full-size element repeated by the trace counter plus a remainder element,
/// so long single-target runs cost trace elements rather than pattern slots.
pub fn to_trace_elements(rep: &KmersRepresentation) -> Result<TraceLayout> {
    let offset_of = |target: u64| -> Result<i16> {
        let offset = target as i64 - rep.branch_pc as i64;
        if !(crate::element::OFFSET_MIN..=crate::element::OFFSET_MAX).contains(&offset) {
            return Err(TraceError::OffsetOverflow(offset));
        }
        Ok(offset as i16)
    };
    // (pattern elements, trace counter) per output element
    let mut planned: Vec<(Vec<PatternElement>, u64)> = Vec::new();
    for (s, run) in rep.runs() {
        let vanilla = rep.expand_to_vanilla(s)?;
        if let [v] = vanilla.as_slice() {
            if v.count > MAX_REPS {
                let off = offset_of(v.target_pc)?;
                let total = v.count * run;
                planned.push((vec![PatternElement::new(off as i64, MAX_REPS as u8)?], total / MAX_REPS));
                if total % MAX_REPS != 0 {
                    planned.push((vec![PatternElement::new(off as i64, (total % MAX_REPS) as u8)?], 1));
                }
                continue;
            }
        }
        let mut elems = Vec::new();
        for v in vanilla {
            elems.extend(split_overflow(offset_of(v.target_pc)?, v.count));
        }
        planned.push((elems, run));
    }
    let mut distinct: Vec<Vec<PatternElement>> = Vec::new();
    for (e, _) in &planned {
        if !distinct.contains(e) {
            distinct.push(e.clone());
        }
    }
    let (patterns, slots) = compact_pattern_store(&distinct)?;
    let mut trace = Vec::with_capacity(planned.len() + 1);
    for (elems, run) in &planned {
        let i = distinct.iter().position(|d| d == elems).expect("collected above");
        let reps: u64 = elems.iter().map(|p| p.reps() as u64).sum();
        trace.push(TraceElement::new(
            slots[i],
            checked_u16("pattern counter", reps)?,
            checked_u16("trace counter", *run)?,
        ));
    }
    trace.push(TraceElement::EOT);
    Ok(TraceLayout { patterns, trace })
}

/// `rep` with every pattern expanded: `K` is the base DNA string and `P` is empty.
pub fn flatten(rep: &KmersRepresentation) -> Result<KmersRepresentation> {
    Ok(KmersRepresentation {
        branch_pc: rep.branch_pc,
        k_trace: rep.expand()?,
        patterns: Vec::new(),
        symbol_map: rep.symbol_map.clone(),
    })
}

/// [`to_trace_elements`], retrying on the flat form when the referenced
/// patterns do not fit one pattern-table entry. The flag reports the fallback.
pub fn to_trace_layout(rep: &KmersRepresentation) -> Result<(TraceLayout, bool)> {
    match to_trace_elements(rep) {
        Err(TraceError::CapacityExceeded { .. }) if !rep.patterns.is_empty() => {
            Ok((to_trace_elements(&flatten(rep)?)?, true))
        }
        other => other.map(|l| (l, false)),
    }
}

/// Sequential expansion of a layout: every outcome in order, one pass over the trace.
pub fn expand_layout(branch_pc: u64, layout: &TraceLayout) -> Vec<u64> {
    let mut out = Vec::new();
    for e in layout.trace.iter().take_while(|e| !e.eot) {
        let pat = &layout.patterns[e.pattern_index as usize..][..e.pattern_size as usize];
        for _ in 0..e.trace_counter {
            for p in pat {
                let target = (branch_pc as i64 + p.target_offset() as i64) as u64;
                out.extend(std::iter::repeat_n(target, p.reps() as usize));
            }
        }
    }
    out
}
