//! Seeded generators for traces, bundles and constant-time programs.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::bundle::{BranchRecord, TraceBundle};
use crate::element::{HintInfo, PatternElement, PatternSlot, TraceElement, ENTRY_ELEMENTS};
use crate::trace::{Pc, RawTrace, VanillaElement, VanillaTrace};
use crate::uasm::{parse, Program};

pub const BRANCH_PC: Pc = 0x400;

/// Log-uniform length in `1..=max`.
fn log_len<R: Rng>(rng: &mut R, max: usize) -> usize {
    let e = rng.gen_range(0.0..=(max as f64).ln());
    (e.exp() as usize).clamp(1, max)
}

fn targets<R: Rng>(rng: &mut R, n: usize) -> Vec<Pc> {
    let mut offs: Vec<i64> = (-40..40).filter(|&o| o != 0).collect();
    offs.shuffle(rng);
    offs[..n].iter().map(|&o| (BRANCH_PC as i64 + o) as Pc).collect()
}

/// A primitive block of vanilla elements whose targets differ at every
/// boundary, including the wrap-around from last to first when `wrap` is set.
fn block<R: Rng>(rng: &mut R, len: usize, tgts: &[Pc], max_count: u64, wrap: bool) -> Vec<VanillaElement> {
    debug_assert!(!wrap || len.is_multiple_of(2) || tgts.len() > 2 || len == 1);
    loop {
        let mut b: Vec<VanillaElement> = Vec::with_capacity(len);
        while b.len() < len {
            let t = *tgts.choose(rng).expect("targets");
            if b.last().is_some_and(|l| l.target_pc == t) {
                continue;
            }
            b.push(VanillaElement::new(t, rng.gen_range(1..=max_count)));
        }
        let wraps = !wrap || len == 1 || b[0].target_pc != b[len - 1].target_pc;
        let primitive = (1..len).filter(|d| len.is_multiple_of(*d)).all(|d| b[..len - d] != b[d..]);
        if wraps && primitive {
            return b;
        }
    }
}

/// A raw trace of at most `max_len` outcomes: either a repeated block,
/// optionally followed by a short tail, or an aperiodic walk. Both use at most
/// sixteen distinct vanilla elements, so every trace fits one trace unit entry.
pub fn raw_trace<R: Rng>(rng: &mut R, max_len: usize) -> RawTrace {
    let len = log_len(rng, max_len);
    let nt = rng.gen_range(2..=3);
    let tgts = targets(rng, nt);
    let max_count = if tgts.len() == 2 { 8 } else { 5 };
    let mut out: Vec<Pc> = Vec::with_capacity(len);
    if rng.gen_bool(0.5) {
        let bl = rng.gen_range(1..=8);
        let b = block(rng, bl, &tgts, max_count, false);
        'fill: loop {
            for e in &b {
                for _ in 0..e.count {
                    if out.len() == len {
                        break 'fill;
                    }
                    out.push(e.target_pc);
                }
            }
        }
        if rng.gen_bool(0.3) {
            let cut = rng.gen_range(0..=out.len().min(20));
            out.truncate(out.len() - cut);
            while out.len() < len {
                out.push(*tgts.choose(rng).expect("targets"));
            }
        }
    } else {
        let mut last = None;
        while out.len() < len {
            let t = *tgts.choose(rng).expect("targets");
            if Some(t) == last {
                continue;
            }
            last = Some(t);
            let n = rng.gen_range(1..=max_count as usize).min(len - out.len());
            out.extend(std::iter::repeat_n(t, n));
        }
    }
    RawTrace::new(BRANCH_PC, out)
}

/// `B^n` with `|B|` in `b_range` and `n` in `n_range`; returns the trace, `|B|` and `n`.
pub fn looped_vanilla<R: Rng>(
    rng: &mut R,
    b_range: std::ops::RangeInclusive<usize>,
    n_range: std::ops::RangeInclusive<usize>,
) -> (VanillaTrace, usize, usize) {
    let b = rng.gen_range(b_range);
    let n = rng.gen_range(n_range);
    // an odd cycle needs a third target
    let nt = rng.gen_range(if b % 2 == 1 { 3 } else { 2 }..=4);
    let tgts = targets(rng, nt);
    let blk = block(rng, b, &tgts, 6, true);
    (VanillaTrace::new(BRANCH_PC, blk.repeat(n)), b, n)
}

fn random_record<R: Rng>(rng: &mut R, pc: Pc) -> BranchRecord {
    if rng.gen_bool(0.3) {
        return BranchRecord::single_target(pc, (pc as i64 + rng.gen_range(-2048..=2047)) as Pc)
            .expect("offset in range");
    }
    let n_pat = rng.gen_range(1..=ENTRY_ELEMENTS);
    let patterns: Vec<PatternElement> = (0..n_pat)
        .map(|_| PatternElement::new(rng.gen_range(-2048..=2047), rng.gen_range(1..=255)).expect("in range"))
        .collect();
    let n_el = if rng.gen_bool(0.5) { rng.gen_range(1..ENTRY_ELEMENTS) } else { rng.gen_range(1..200) };
    let trace = (0..n_el)
        .map(|_| {
            let index = rng.gen_range(0..n_pat);
            let size = rng.gen_range(1..=n_pat - index);
            let reps: u32 = patterns[index..index + size].iter().map(|p| p.reps() as u32).sum();
            let slot = PatternSlot { index: index as u8, size: size as u8 };
            TraceElement::new(slot, rng.gen_range(1..=reps.min(u16::MAX as u32)) as u16, rng.gen_range(1..=u16::MAX))
        })
        .collect();
    BranchRecord::traced(pc, patterns, trace)
}

/// A structurally valid bundle with up to 24 records.
pub fn bundle<R: Rng>(rng: &mut R) -> TraceBundle {
    let lo: Pc = rng.gen_range(0..1 << 20);
    let hi = lo + rng.gen_range(1..4096);
    let n = rng.gen_range(0..24);
    let mut pcs: Vec<Pc> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    pcs.sort_unstable();
    pcs.dedup();
    let records = pcs.into_iter().map(|pc| random_record(rng, pc)).collect();
    TraceBundle::new(rng.gen(), (lo, hi), records).expect("generated records are valid")
}

/// Random hint bits, valid or not.
pub fn hint_info<R: Rng>(rng: &mut R) -> HintInfo {
    HintInfo { single_target: rng.gen(), field12: rng.gen_range(-2048..=2047), short_trace: rng.gen() }
}

struct ProgGen<'a, R> {
    rng: &'a mut R,
    out: String,
    labels: usize,
    depth: usize,
    funcs: usize,
}

const DATA: [&str; 4] = ["a", "b", "c", "x"];

impl<R: Rng> ProgGen<'_, R> {
    fn label(&mut self) -> String {
        self.labels += 1;
        format!("l{}", self.labels)
    }

    fn data(&mut self) -> &'static str {
        DATA.choose(self.rng).expect("registers")
    }

    /// Address built only from public values.
    fn addr(&mut self) -> String {
        if self.depth > 0 && self.rng.gen_bool(0.5) {
            format!("i{} & 3", self.rng.gen_range(0..self.depth))
        } else {
            self.rng.gen_range(0..4).to_string()
        }
    }

    fn straight(&mut self) {
        for _ in 0..self.rng.gen_range(1..=4) {
            let d = self.data();
            let line = match self.rng.gen_range(0..4) {
                0 => format!("load {d}, {}", self.addr()),
                1 => format!("store {d}, 32 + ({})", self.addr()),
                _ => {
                    let (s, t) = (self.data(), self.data());
                    let op = ["+", "^", "*", "&", "|", "-"].choose(self.rng).expect("ops");
                    format!("assign {d}, {s} {op} {t} + {}", self.rng.gen_range(0..9))
                }
            };
            let _ = writeln!(self.out, "    {line} @c");
        }
    }

    fn body(&mut self) {
        for _ in 0..self.rng.gen_range(1..=3) {
            match self.rng.gen_range(0..4) {
                0 | 1 => self.straight(),
                2 if self.depth < 2 => self.counted_loop(),
                3 if self.funcs > 0 => {
                    let f = self.rng.gen_range(0..self.funcs);
                    let _ = writeln!(self.out, "    call f{f} @c");
                }
                _ => self.straight(),
            }
        }
    }

    fn counted_loop(&mut self) {
        let i = format!("i{}", self.depth);
        let top = self.label();
        let n = self.rng.gen_range(1..=4);
        let _ = writeln!(self.out, "    assign {i}, {n} @c\n{top}:");
        self.depth += 1;
        self.body();
        self.depth -= 1;
        let _ = writeln!(self.out, "    assign {i}, {i} - 1 @c\n    assign d, {i} == 0 @c\n    beqz d, {top} @c");
    }
}

/// A constant-time program: branch conditions and addresses depend only on
/// loop counters, four secret memory cells feed the data registers.
pub fn ct_program<R: Rng>(rng: &mut R, name: &str) -> Program {
    let funcs = rng.gen_range(0..=2);
    let mut g = ProgGen { rng, out: String::new(), labels: 0, depth: 0, funcs };
    let _ = writeln!(g.out, ".name {name}\n.secret mem 0 4");
    let _ = writeln!(g.out, "    assign z, 1");
    g.body();
    let _ = writeln!(g.out, "    ret @c");
    for f in 0..funcs {
        let _ = writeln!(g.out, "f{f}:");
        g.funcs = f;
        g.straight();
        let _ = writeln!(g.out, "    ret @c");
    }
    parse(&g.out).unwrap_or_else(|e| panic!("generated program does not parse: {e}\n{}", g.out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::to_vanilla;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn raw_traces_stay_within_sixteen_symbols() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let r = raw_trace(&mut rng, 5000);
            assert!(!r.outcomes.is_empty() && r.outcomes.len() <= 5000);
            let v = to_vanilla(&r).unwrap();
            let mut syms = v.elements.clone();
            syms.sort_by_key(|e| (e.target_pc, e.count));
            syms.dedup();
            assert!(syms.len() <= 16);
        }
    }

    #[test]
    fn looped_block_is_run_length_maximal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (v, b, n) = looped_vanilla(&mut rng, 2..=8, 10..=50);
            assert_eq!(v.len(), b * n);
            assert!(v.is_run_length_maximal());
        }
    }

    #[test]
    fn programs_are_deterministic_per_seed() {
        let a = ct_program(&mut ChaCha8Rng::seed_from_u64(9), "g");
        let b = ct_program(&mut ChaCha8Rng::seed_from_u64(9), "g");
        assert_eq!(a, b);
    }
}
