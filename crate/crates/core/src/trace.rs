//! Per-branch trace representations: raw outcome sequences, their run-length
//! (vanilla) form, the symbol string fed to k-mer compression, and the
//! compressed k-mers representation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TraceError};

/// Code address. Programs are addressed by instruction index.
pub type Pc = u64;

/// One dynamic execution of a branch and where it went.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BranchOutcome {
    pub branch_pc: Pc,
    pub target_pc: Pc,
}

/// Every target a static branch jumped to, in execution order. Not-taken
/// conditional branches record their fall-through pc.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTrace {
    pub branch_pc: Pc,
    pub outcomes: Vec<Pc>,
}

impl RawTrace {
    pub fn new(branch_pc: Pc, outcomes: Vec<Pc>) -> Self {
        Self { branch_pc, outcomes }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VanillaElement {
    pub target_pc: Pc,
    pub count: u64,
}

impl VanillaElement {
    pub fn new(target_pc: Pc, count: u64) -> Self {
        Self { target_pc, count }
    }
}

impl fmt::Display for VanillaElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:#x},{})", self.target_pc, self.count)
    }
}

/// Run-length encoded outcome sequence. Adjacent elements never share a target.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VanillaTrace {
    pub branch_pc: Pc,
    pub elements: Vec<VanillaElement>,
}

impl VanillaTrace {
    pub fn new(branch_pc: Pc, elements: Vec<VanillaElement>) -> Self {
        Self { branch_pc, elements }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Number of dynamic outcomes the trace stands for.
    pub fn raw_len(&self) -> u64 {
        self.elements.iter().map(|e| e.count).sum()
    }

    pub fn expand(&self) -> Vec<Pc> {
        let mut out = Vec::with_capacity(self.raw_len() as usize);
        for e in &self.elements {
            out.extend(std::iter::repeat_n(e.target_pc, e.count as usize));
        }
        out
    }

    pub fn is_run_length_maximal(&self) -> bool {
        self.elements.iter().all(|e| e.count >= 1) && self.elements.windows(2).all(|w| w[0].target_pc != w[1].target_pc)
    }

    /// Number of distinct targets.
    pub fn distinct_targets(&self) -> usize {
        let mut targets: Vec<Pc> = self.elements.iter().map(|e| e.target_pc).collect();
        targets.sort_unstable();
        targets.dedup();
        targets.len()
    }
}

/// One letter of the DNA alphabet. Base letters are dense ids in first-appearance
/// order; pattern letters are allocated above them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Symbol(pub u32);

impl Symbol {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DnaSequence {
    pub branch_pc: Pc,
    pub symbols: Vec<Symbol>,
    /// Indexed by base symbol id.
    pub symbol_map: Vec<VanillaElement>,
}

impl DnaSequence {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// A detected repeating k-mer, named by a fresh symbol. The body may reference
/// base symbols and earlier patterns.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pattern {
    pub id: Symbol,
    pub body: Vec<Symbol>,
}

/// Compressed trace `K` over pattern and base symbols together with the
/// pattern set `P` and the base symbol map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KmersRepresentation {
    pub branch_pc: Pc,
    pub k_trace: Vec<Symbol>,
    pub patterns: Vec<Pattern>,
    pub symbol_map: Vec<VanillaElement>,
}

impl KmersRepresentation {
    fn pattern(&self, s: Symbol) -> Option<&Pattern> {
        let base = self.symbol_map.len();
        let idx = s.index().checked_sub(base)?;
        self.patterns.get(idx).filter(|p| p.id == s)
    }

    /// Recursively substitutes pattern symbols until only base symbols remain.
    pub fn expand_symbol(&self, s: Symbol, out: &mut Vec<Symbol>) -> Result<()> {
        if s.index() < self.symbol_map.len() {
            out.push(s);
            return Ok(());
        }
        let p = self.pattern(s).ok_or(TraceError::DanglingSymbol(s.0))?;
        for &b in &p.body {
            // Bodies only reference earlier ids, so recursion terminates.
            if b >= s {
                return Err(TraceError::DanglingSymbol(b.0));
            }
            self.expand_symbol(b, out)?;
        }
        Ok(())
    }

    /// Expansion of `K` back to the base DNA string.
    pub fn expand(&self) -> Result<Vec<Symbol>> {
        let mut out = Vec::new();
        for &s in &self.k_trace {
            self.expand_symbol(s, &mut out)?;
        }
        Ok(out)
    }

    /// Base-symbol length of a symbol's expansion.
    pub fn expanded_len(&self, s: Symbol) -> Result<usize> {
        let mut out = Vec::new();
        self.expand_symbol(s, &mut out)?;
        Ok(out.len())
    }

    /// The symbol's expansion mapped back to vanilla elements.
    pub fn expand_to_vanilla(&self, s: Symbol) -> Result<Vec<VanillaElement>> {
        let mut out = Vec::new();
        self.expand_symbol(s, &mut out)?;
        Ok(out.into_iter().map(|b| self.symbol_map[b.index()]).collect())
    }

    /// `K` with runs of equal symbols collapsed, as `(symbol, run length)`.
    pub fn runs(&self) -> Vec<(Symbol, u64)> {
        let mut runs: Vec<(Symbol, u64)> = Vec::new();
        for &s in &self.k_trace {
            match runs.last_mut() {
                Some((last, n)) if *last == s => *n += 1,
                _ => runs.push((s, 1)),
            }
        }
        runs
    }

    /// Size of the representation as reported in compression tables: the
    /// collapsed trace length plus the vanilla length of every distinct
    /// symbol the trace references.
    pub fn size(&self) -> usize {
        let runs = self.runs();
        let mut seen: Vec<Symbol> = runs.iter().map(|r| r.0).collect();
        seen.sort_unstable();
        seen.dedup();
        let patterns: usize = seen.iter().map(|&s| self.expanded_len(s).unwrap_or(0)).sum();
        runs.len() + patterns
    }
}
