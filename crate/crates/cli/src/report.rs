//! Reports shared by the text and JSON outputs.

use std::fmt::Write as _;

use serde::Serialize;

use replay_core::btusim::SimStats;
use replay_core::bundle::TraceBundle;
use replay_core::compression::{expand_layout, kmers_compress, to_dna, to_vanilla, TraceLayout, DEFAULT_MAX_K};
use replay_core::trace::{Pc, RawTrace};
use replay_core::tracegen::{BranchAnalysis, ClassKind};

/// Rates are kept to three decimals so both outputs agree digit for digit.
fn rate(vanilla: usize, kmers: usize) -> f64 {
    if kmers == 0 {
        return 0.0;
    }
    (vanilla as f64 / kmers as f64 * 1000.0).round() / 1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchRow {
    pub branch_pc: Pc,
    pub kind: String,
    pub vanilla_size: usize,
    pub kmers_size: usize,
    pub rate: f64,
    pub flat_fallback: bool,
}

impl BranchRow {
    fn new(branch_pc: Pc, kind: &str, vanilla_size: usize, kmers_size: usize, flat_fallback: bool) -> Self {
        let rate = rate(vanilla_size, kmers_size);
        Self { branch_pc, kind: kind.into(), vanilla_size, kmers_size, rate, flat_fallback }
    }

    fn single_target(&self) -> bool {
        self.kind == "single-target"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub branches: usize,
    pub avg_vanilla: f64,
    pub max_vanilla: usize,
    pub avg_kmers: f64,
    pub max_kmers: usize,
    pub avg_rate: f64,
    pub max_rate: f64,
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Aggregates over every branch with more than one target; `None` if there is none.
pub fn aggregate(rows: &[BranchRow]) -> Option<Aggregate> {
    let rows: Vec<&BranchRow> = rows.iter().filter(|r| !r.single_target()).collect();
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let avg = |f: &dyn Fn(&BranchRow) -> f64| round3(rows.iter().map(|r| f(r)).sum::<f64>() / n);
    Some(Aggregate {
        branches: rows.len(),
        avg_vanilla: avg(&|r| r.vanilla_size as f64),
        max_vanilla: rows.iter().map(|r| r.vanilla_size).max().unwrap_or(0),
        avg_kmers: avg(&|r| r.kmers_size as f64),
        max_kmers: rows.iter().map(|r| r.kmers_size).max().unwrap_or(0),
        avg_rate: avg(&|r| r.rate),
        max_rate: rows.iter().map(|r| r.rate).fold(0.0, f64::max),
    })
}

pub fn kind_name(k: ClassKind) -> &'static str {
    match k {
        ClassKind::SingleTarget => "single-target",
        ClassKind::ShortTrace => "short-trace",
        ClassKind::MultiTarget => "multi-target",
        ClassKind::StreamLoop => "stream-loop",
    }
}

pub fn rows_from_analysis(branches: &[BranchAnalysis]) -> Vec<BranchRow> {
    branches
        .iter()
        .map(|b| {
            let size = if b.kind == ClassKind::SingleTarget { 0 } else { b.kmers.size() };
            BranchRow::new(b.branch_pc, kind_name(b.kind), b.vanilla_len, size, b.flat_fallback)
        })
        .collect()
}

/// Rows for a bundle: one stored period per branch, sized as pattern plus
/// trace elements.
pub fn rows_from_bundle(bundle: &TraceBundle) -> anyhow::Result<Vec<BranchRow>> {
    let mut rows = Vec::with_capacity(bundle.records.len());
    for r in &bundle.records {
        if r.is_single_target() {
            rows.push(BranchRow::new(r.branch_pc, "single-target", 1, 0, false));
            continue;
        }
        let layout = TraceLayout { patterns: r.patterns.clone(), trace: r.body().to_vec() };
        let period = RawTrace::new(r.branch_pc, expand_layout(r.branch_pc, &layout));
        let vanilla = to_vanilla(&period)?.len();
        rows.push(BranchRow::new(r.branch_pc, "traced", vanilla, r.patterns.len() + r.body().len(), false));
    }
    Ok(rows)
}

/// Rows for raw traces with no program context: every branch is compressed as is.
pub fn rows_from_traces<'a>(traces: impl IntoIterator<Item = &'a RawTrace>) -> anyhow::Result<Vec<BranchRow>> {
    let mut rows = Vec::new();
    for t in traces {
        let v = to_vanilla(t)?;
        let single = t.outcomes.iter().all(|&o| o == t.outcomes[0]);
        let kind = if single { "single-target" } else { "multi-target" };
        let size = if single { 0 } else { kmers_compress(&to_dna(&v), DEFAULT_MAX_K).size() };
        rows.push(BranchRow::new(t.branch_pc, kind, v.len(), size, false));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub mode: String,
    pub input: String,
    pub committed_matches_sequential: bool,
    pub stats: SimStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NiReport {
    pub variant: String,
    pub states: usize,
    pub pass: bool,
    pub classes: Option<usize>,
    pub pairs: Option<u64>,
    pub counterexample: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Report {
    pub command: String,
    pub source: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub branches: Vec<BranchRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<Aggregate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ni: Option<NiReport>,
}

impl Report {
    pub fn new(command: &str, source: &str) -> Self {
        Self { command: command.into(), source: source.into(), ..Default::default() }
    }

    pub fn with_branches(mut self, rows: Vec<BranchRow>) -> Self {
        self.aggregate = aggregate(&rows);
        self.branches = rows;
        self
    }

    /// Line-oriented key=value form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "source={}", self.source);
        for r in &self.branches {
            let _ = writeln!(
                s,
                "branch pc={:#x} kind={} vanilla_size={} kmers_size={} rate={}{}",
                r.branch_pc,
                r.kind,
                r.vanilla_size,
                r.kmers_size,
                r.rate,
                if r.flat_fallback { " flat_fallback=true" } else { "" }
            );
        }
        if !self.branches.is_empty() {
            match &self.aggregate {
                Some(a) => {
                    let _ = writeln!(s, "aggregate branches={}", a.branches);
                    let _ = writeln!(
                        s,
                        "aggregate avg vanilla_size={} kmers_size={} rate={}",
                        a.avg_vanilla, a.avg_kmers, a.avg_rate
                    );
                    let _ = writeln!(
                        s,
                        "aggregate max vanilla_size={} kmers_size={} rate={}",
                        a.max_vanilla, a.max_kmers, a.max_rate
                    );
                }
                None => {
                    let _ = writeln!(s, "aggregate branches=0");
                }
            }
        }
        if let Some(sim) = &self.sim {
            let _ = writeln!(s, "mode={}", sim.mode);
            let _ = writeln!(s, "input={}", sim.input);
            let _ = writeln!(s, "committed_matches_sequential={}", sim.committed_matches_sequential);
            s.push_str(&sim.stats.to_kv());
            if !s.ends_with('\n') {
                s.push('\n');
            }
        }
        if let Some(ni) = &self.ni {
            let _ = writeln!(s, "variant={}", ni.variant);
            let _ = writeln!(s, "states={}", ni.states);
            let _ = writeln!(s, "verdict={}", if ni.pass { "pass" } else { "fail" });
            if let (Some(c), Some(p)) = (ni.classes, ni.pairs) {
                let _ = writeln!(s, "classes={c}\npairs={p}");
            }
            if let Some(c) = &ni.counterexample {
                for line in c.lines() {
                    let _ = writeln!(s, "# {line}");
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use replay_core::trace::RawTrace;

    #[test]
    fn br1_row_uses_the_caption_formula() {
        // (90,2)(105,5)(90,2)(105,5)(120,3) as raw outcomes
        let mut outcomes = Vec::new();
        for (t, n) in [(90u64, 2), (105, 5), (90, 2), (105, 5), (120, 3)] {
            outcomes.extend(std::iter::repeat_n(t, n));
        }
        let rows = rows_from_traces([&RawTrace::new(100, outcomes)]).unwrap();
        assert_eq!(rows[0].vanilla_size, 5);
        // two runs plus three distinct elements behind them
        assert_eq!(rows[0].kmers_size, 5);
        assert_eq!(rows[0].rate, 1.0);
    }

    #[test]
    fn single_target_rows_are_not_aggregated() {
        let rows = rows_from_traces([&RawTrace::new(4, vec![9; 40])]).unwrap();
        assert_eq!(rows[0].kind, "single-target");
        assert_eq!(aggregate(&rows), None);
    }

    #[test]
    fn aggregate_takes_mean_and_max() {
        let rows = vec![
            BranchRow::new(1, "multi-target", 10, 5, false),
            BranchRow::new(2, "short-trace", 30, 3, false),
            BranchRow::new(3, "single-target", 1, 0, false),
        ];
        let a = aggregate(&rows).unwrap();
        assert_eq!((a.branches, a.avg_vanilla, a.max_vanilla), (2, 20.0, 30));
        assert_eq!((a.avg_rate, a.max_rate), (6.0, 10.0));
    }
}
