//! Offline trace generation: branch logs in, trace bundle out.
//!
//! The program runs on two public inputs that differ only in stream length.
//! Each crypto branch is compressed on both runs; branches whose traces
//! disagree are stream loops and get no trace. The rest are classified as
//! single-target, short-trace or multi-target and packed into the bundle.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bundle::{BranchRecord, TraceBundle};
use crate::compression::{kmers_compress, to_dna, to_trace_layout, to_vanilla, TraceLayout, DEFAULT_MAX_K};
use crate::element::ENTRY_ELEMENTS;
use crate::error::TraceError;
use crate::par::{map_collect, Exec};
use crate::trace::{KmersRepresentation, Pc, RawTrace, VanillaTrace};
use crate::uasm::{emit_branch_log, ArchState, BranchKind, InputSpec, Program, SecretDomain, UasmError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceGenError {
    #[error("branch log is empty")]
    EmptyLog,
    #[error("branch log line {line}: {msg}")]
    BadLog { line: usize, msg: String },
    #[error("control flow of branch {branch_pc:#x} differs between runs on the same public input")]
    NonConstantControlFlow { branch_pc: Pc },
    #[error("branch {branch_pc:#x}: {source}")]
    Branch { branch_pc: Pc, source: TraceError },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Uasm(#[from] UasmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub index: u64,
    pub kind: BranchKind,
    pub branch_pc: Pc,
    pub target_pc: Pc,
}

/// Dynamic branch profile. Text form: one record per line,
/// `index kind branch_pc target_pc` with numbers in hex and kind one of
/// `cond`, `call`, `ret`, `ind`. Blank lines and `#` comments are ignored.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchLog {
    pub records: Vec<LogRecord>,
}

impl BranchLog {
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.records.len() * 16);
        for r in &self.records {
            let _ = writeln!(s, "{:x} {} {:x} {:x}", r.index, r.kind.name(), r.branch_pc, r.target_pc);
        }
        s
    }

    pub fn parse_text(text: &str) -> Result<Self, TraceGenError> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| TraceGenError::BadLog { line: n + 1, msg };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", f.len())));
            }
            let hex = |s: &str| {
                u64::from_str_radix(s.trim_start_matches("0x"), 16).map_err(|_| bad(format!("bad hex `{s}`")))
            };
            let kind = BranchKind::from_name(f[1]).ok_or_else(|| bad(format!("unknown kind `{}`", f[1])))?;
            records.push(LogRecord { index: hex(f[0])?, kind, branch_pc: hex(f[2])?, target_pc: hex(f[3])? });
        }
        let log = BranchLog { records };
        log.validate(None)?;
        Ok(log)
    }

    /// Indices strictly increase; with a program length, pcs lie in the text
    /// and targets in the text or at its end.
    pub fn validate(&self, program_len: Option<u64>) -> Result<(), TraceGenError> {
        for (i, w) in self.records.windows(2).enumerate() {
            if w[1].index <= w[0].index {
                return Err(TraceGenError::BadLog { line: i + 2, msg: "indices must strictly increase".into() });
            }
        }
        if let Some(len) = program_len {
            if let Some((i, _)) = self.records.iter().enumerate().find(|(_, r)| r.branch_pc >= len || r.target_pc > len)
            {
                return Err(TraceGenError::BadLog { line: i + 1, msg: "address outside program text".into() });
            }
        }
        Ok(())
    }

    /// Raw trace of every branch accepted by `keep`, keyed by branch pc.
    pub fn raw_traces(&self, keep: impl Fn(Pc) -> bool) -> BTreeMap<Pc, RawTrace> {
        let mut out: BTreeMap<Pc, RawTrace> = BTreeMap::new();
        for r in self.records.iter().filter(|r| keep(r.branch_pc)) {
            out.entry(r.branch_pc).or_insert_with(|| RawTrace::new(r.branch_pc, Vec::new())).outcomes.push(r.target_pc);
        }
        out
    }
}

pub fn detect_static_branches(log: &BranchLog) -> Result<BTreeSet<Pc>, TraceGenError> {
    if log.records.is_empty() {
        return Err(TraceGenError::EmptyLog);
    }
    Ok(log.records.iter().map(|r| r.branch_pc).collect())
}

/// Shortest prefix whose repetition is the whole trace. Replay restarts the
/// trace after its end marker, so storing one period loses nothing.
pub fn primitive_period(v: &VanillaTrace) -> VanillaTrace {
    let e = &v.elements;
    let n = e.len();
    for p in 1..=n / 2 {
        if n.is_multiple_of(p) && (p..n).all(|i| e[i] == e[i - p]) {
            return VanillaTrace::new(v.branch_pc, e[..p].to_vec());
        }
    }
    v.clone()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassKind {
    SingleTarget,
    ShortTrace,
    MultiTarget,
    StreamLoop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BranchClass {
    SingleTarget { offset: i64 },
    ShortTrace(BranchRecord),
    MultiTarget(BranchRecord),
    StreamLoop,
}

impl BranchClass {
    pub fn kind(&self) -> ClassKind {
        match self {
            BranchClass::SingleTarget { .. } => ClassKind::SingleTarget,
            BranchClass::ShortTrace(_) => ClassKind::ShortTrace,
            BranchClass::MultiTarget(_) => ClassKind::MultiTarget,
            BranchClass::StreamLoop => ClassKind::StreamLoop,
        }
    }
}

/// Representations differing anywhere (including the pattern set) mean the
/// branch's control flow depends on the stream length.
pub fn classify_branch(
    v1: &VanillaTrace,
    rep1: &KmersRepresentation,
    rep2: &KmersRepresentation,
) -> Result<BranchClass, TraceError> {
    if rep1 != rep2 {
        return Ok(BranchClass::StreamLoop);
    }
    if v1.distinct_targets() == 1 {
        return Ok(BranchClass::SingleTarget { offset: v1.elements[0].target_pc as i64 - v1.branch_pc as i64 });
    }
    let (layout, _) = to_trace_layout(rep1)?;
    let record = BranchRecord::traced(v1.branch_pc, layout.patterns, layout.trace);
    Ok(if record.trace.len() <= ENTRY_ELEMENTS {
        BranchClass::ShortTrace(record)
    } else {
        BranchClass::MultiTarget(record)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceGenOptions {
    pub max_k: usize,
    pub budget: u64,
    pub exec: Exec,
}

impl Default for TraceGenOptions {
    fn default() -> Self {
        Self { max_k: DEFAULT_MAX_K, budget: crate::uasm::DEFAULT_STEP_BUDGET, exec: Exec::Parallel }
    }
}

/// Per-branch outcome of trace generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchAnalysis {
    pub branch_pc: Pc,
    pub kind: ClassKind,
    /// Raw trace length on the first input.
    pub raw_len: usize,
    pub vanilla_len: usize,
    /// Vanilla length of the stored period.
    pub period_len: usize,
    pub kmers: KmersRepresentation,
    pub layout: Option<TraceLayout>,
    /// The k-mers patterns did not fit one entry and the flat form is stored.
    pub flat_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceGenOutput {
    pub bundle: TraceBundle,
    pub branches: Vec<BranchAnalysis>,
}

impl TraceGenOutput {
    pub fn class_of(&self, pc: Pc) -> Option<ClassKind> {
        self.branches.iter().find(|b| b.branch_pc == pc).map(|b| b.kind)
    }
}

fn analyze(
    pc: Pc,
    raw1: Option<&RawTrace>,
    raw2: Option<&RawTrace>,
    max_k: usize,
) -> Result<BranchAnalysis, TraceError> {
    let empty = RawTrace::new(pc, Vec::new());
    let raw1 = raw1.unwrap_or(&empty);
    // A branch that runs on only one input is input-length dependent.
    let Some(raw2) = raw2.filter(|_| !raw1.outcomes.is_empty()) else {
        let src = if raw1.outcomes.is_empty() { raw2.unwrap_or(&empty) } else { raw1 };
        let v = to_vanilla(src)?;
        return Ok(BranchAnalysis {
            branch_pc: pc,
            kind: ClassKind::StreamLoop,
            raw_len: raw1.outcomes.len(),
            vanilla_len: v.len(),
            period_len: v.len(),
            kmers: kmers_compress(&to_dna(&v), max_k),
            layout: None,
            flat_fallback: false,
        });
    };
    let v1 = to_vanilla(raw1)?;
    let p1 = primitive_period(&v1);
    let p2 = primitive_period(&to_vanilla(raw2)?);
    let rep1 = kmers_compress(&to_dna(&p1), max_k);
    let rep2 = if p2 == p1 { rep1.clone() } else { kmers_compress(&to_dna(&p2), max_k) };
    let class = classify_branch(&p1, &rep1, &rep2)?;
    let (layout, flat_fallback) = match &class {
        BranchClass::ShortTrace(_) | BranchClass::MultiTarget(_) => {
            let (l, flat) = to_trace_layout(&rep1)?;
            (Some(l), flat)
        }
        _ => (None, false),
    };
    Ok(BranchAnalysis {
        branch_pc: pc,
        kind: class.kind(),
        raw_len: raw1.outcomes.len(),
        vanilla_len: v1.len(),
        period_len: p1.len(),
        kmers: rep1,
        layout,
        flat_fallback,
    })
}

/// Builds the bundle from two branch logs of the same program.
pub fn generate_from_logs(
    p: &Program,
    log1: &BranchLog,
    log2: &BranchLog,
    opts: &TraceGenOptions,
) -> Result<TraceGenOutput, TraceGenError> {
    log1.validate(Some(p.end()))?;
    log2.validate(Some(p.end()))?;
    let mut pcs = detect_static_branches(log1)?;
    pcs.extend(detect_static_branches(log2)?);
    let in_range = |pc: Pc| p.in_crypto_range(pc);
    pcs.retain(|&pc| in_range(pc));
    let t1 = log1.raw_traces(in_range);
    let t2 = log2.raw_traces(in_range);
    let pcs: Vec<Pc> = pcs.into_iter().collect();
    let analyses = map_collect(&pcs, opts.exec, |&pc| {
        analyze(pc, t1.get(&pc), t2.get(&pc), opts.max_k)
            .map_err(|source| TraceGenError::Branch { branch_pc: pc, source })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let mut records = Vec::new();
    for a in &analyses {
        let wrap = |source| TraceGenError::Branch { branch_pc: a.branch_pc, source };
        match a.kind {
            ClassKind::SingleTarget => {
                let target = a.kmers.symbol_map[0].target_pc;
                records.push(BranchRecord::single_target(a.branch_pc, target).map_err(wrap)?);
            }
            ClassKind::ShortTrace | ClassKind::MultiTarget => {
                let l = a.layout.clone().expect("traced branches have a layout");
                records.push(BranchRecord::traced(a.branch_pc, l.patterns, l.trace));
            }
            ClassKind::StreamLoop => {}
        }
    }
    let bundle = TraceBundle::new(p.hash(), p.crypto_range(), records)?;
    Ok(TraceGenOutput { bundle, branches: analyses })
}

fn crypto_outcomes(log: &BranchLog, p: &Program) -> Vec<(Pc, Pc)> {
    log.records.iter().filter(|r| p.in_crypto_range(r.branch_pc)).map(|r| (r.branch_pc, r.target_pc)).collect()
}

/// Runs the program on both inputs and builds the bundle.
///
/// The first input also runs with its secret cells overwritten; differing
/// crypto control flow is reported as [`TraceGenError::NonConstantControlFlow`].
pub fn generate_traces(
    p: &Program,
    inp1: &InputSpec,
    inp2: &InputSpec,
    opts: &TraceGenOptions,
) -> Result<TraceGenOutput, TraceGenError> {
    let s1 = ArchState::from_input(p, inp1);
    let s2 = ArchState::from_input(p, inp2);
    let log1 = emit_branch_log(p, &s1, opts.budget)?;
    let log2 = emit_branch_log(p, &s2, opts.budget)?;
    let dom = SecretDomain::of(p);
    let mut probes = vec![s1.clone()];
    if !dom.cells.is_empty() {
        probes.push(dom.apply(&s1, dom.len() - 1));
    }
    let reference = crypto_outcomes(&log1, p);
    for probe in probes {
        let other = crypto_outcomes(&emit_branch_log(p, &probe, opts.budget)?, p);
        if let Some(i) = crate::uasm::contract::first_difference(&reference, &other) {
            let branch_pc = reference.get(i).or(other.get(i)).map(|o| o.0).unwrap_or(0);
            return Err(TraceGenError::NonConstantControlFlow { branch_pc });
        }
    }
    generate_from_logs(p, &log1, &log2, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::VanillaElement;

    fn v(pc: Pc, e: &[(Pc, u64)]) -> VanillaTrace {
        VanillaTrace::new(pc, e.iter().map(|&(t, c)| VanillaElement::new(t, c)).collect())
    }

    fn rep(v: &VanillaTrace) -> KmersRepresentation {
        kmers_compress(&to_dna(v), DEFAULT_MAX_K)
    }

    #[test]
    fn log_text_round_trip() {
        let log = BranchLog {
            records: vec![
                LogRecord { index: 3, kind: BranchKind::Conditional, branch_pc: 0x10, target_pc: 0x4 },
                LogRecord { index: 0x1f, kind: BranchKind::Return, branch_pc: 0x22, target_pc: 0x11 },
            ],
        };
        let text = log.to_text();
        assert_eq!(text, "3 cond 10 4\n1f ret 22 11\n");
        assert_eq!(BranchLog::parse_text(&text).unwrap(), log);
        assert!(matches!(BranchLog::parse_text("2 cond 1 1\n1 cond 1 1"), Err(TraceGenError::BadLog { line: 2, .. })));
        assert!(matches!(BranchLog::parse_text("1 jump 1 1"), Err(TraceGenError::BadLog { line: 1, .. })));
    }

    #[test]
    fn static_branches() {
        assert_eq!(detect_static_branches(&BranchLog::default()), Err(TraceGenError::EmptyLog));
        let records = (0..20)
            .map(|i| LogRecord { index: i, kind: BranchKind::Conditional, branch_pc: i % 8, target_pc: 0 })
            .collect();
        assert_eq!(detect_static_branches(&BranchLog { records }).unwrap(), (0..8).collect());
    }

    #[test]
    fn period_reduction() {
        let t = v(5, &[(1, 15), (6, 1), (1, 15), (6, 1), (1, 15), (6, 1)]);
        assert_eq!(primitive_period(&t), v(5, &[(1, 15), (6, 1)]));
        let t = v(5, &[(1, 4), (6, 1)]);
        assert_eq!(primitive_period(&t), t);
        let t = v(5, &[(1, 1), (2, 1), (1, 1)]);
        assert_eq!(primitive_period(&t), t);
    }

    #[test]
    fn classification() {
        let s = v(10, &[(15, 1000)]);
        assert_eq!(classify_branch(&s, &rep(&s), &rep(&s)).unwrap(), BranchClass::SingleTarget { offset: 5 });

        let br1 = v(100, &[(90, 2), (105, 5), (90, 2), (105, 5), (120, 3)]);
        assert_eq!(classify_branch(&br1, &rep(&br1), &rep(&br1)).unwrap().kind(), ClassKind::ShortTrace);

        let a = v(1, &[(2, 4), (0, 1)]);
        let b = v(1, &[(2, 9), (0, 1)]);
        assert_eq!(classify_branch(&a, &rep(&a), &rep(&b)).unwrap(), BranchClass::StreamLoop);

        // An aperiodic walk over three targets stays longer than one entry.
        let mut x = 7u64;
        let mut t = 0;
        let elems: Vec<_> = (0..200)
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                t = (t + 1 + (x >> 63)) % 3;
                (t + 2, 1)
            })
            .collect();
        let long = v(1, &elems);
        assert!(rep(&long).patterns.len() <= DEFAULT_MAX_K);
        let c = classify_branch(&long, &rep(&long), &rep(&long)).unwrap();
        assert_eq!(c.kind(), ClassKind::MultiTarget);
    }
}
