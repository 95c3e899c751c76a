//! Cycle-approximate in-order frontend feeding a reorder buffer.
//!
//! Each cycle resolves due branches, commits up to `fetch_width` completed
//! instructions, completes trace unit fills and fetches up to `fetch_width`
//! instructions. The correct path comes from the sequential execution; after a
//! misprediction the frontend follows the predicted path until the branch
//! resolves and squashes it.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::btu::{BtuError, BtuGeometry, BtuState, Lookup};
use crate::bundle::TraceBundle;
use crate::predictor::{Predictor, PredictorKind};
use crate::trace::Pc;
use crate::uasm::{run_seq, ArchState, BranchKind, Instr, Program, Step, UasmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Cassandra,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub fetch_width: usize,
    pub rob_size: usize,
    /// Cycles from fetch until a branch resolves.
    pub resolve_latency: u64,
    pub fill_latency: u64,
    /// Cycles before fetch restarts after a squash.
    pub redirect_penalty: u64,
    /// Overrides the bundle's crypto range.
    pub crypto_range: Option<(Pc, Pc)>,
    /// Predictor for non-crypto branches, and for all branches in baseline mode.
    pub predictor: PredictorKind,
    pub integrity_check: bool,
    pub btu_entries: usize,
    pub btu_ways: usize,
    /// Fill the trace unit with the first traced branches before the run.
    pub preload_btu: bool,
    /// Per-cycle probability of squashing a random suffix of the correct path.
    pub squash_injection: f64,
    pub seed: u64,
    pub max_cycles: u64,
    /// Step budget of the sequential run that supplies the correct path.
    pub step_budget: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            fetch_width: 4,
            rob_size: 64,
            resolve_latency: 8,
            fill_latency: 20,
            redirect_penalty: 2,
            crypto_range: None,
            predictor: PredictorKind::TwoBit,
            integrity_check: true,
            btu_entries: 16,
            btu_ways: 1,
            preload_btu: true,
            squash_injection: 0.0,
            seed: 0,
            max_cycles: 10_000_000,
            step_budget: crate::uasm::DEFAULT_STEP_BUDGET,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.into()));
        if self.fetch_width == 0 || self.rob_size == 0 {
            return bad("fetch width and ROB size must be positive");
        }
        if self.resolve_latency == 0 {
            return bad("resolve latency must be positive");
        }
        if !(0.0..=1.0).contains(&self.squash_injection) {
            return bad("squash injection rate must lie in [0, 1]");
        }
        BtuGeometry { entries: self.btu_entries, ways: self.btu_ways }.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SimStats {
    pub cycles: u64,
    pub fetched: u64,
    pub committed: u64,
    /// Trace unit redirects that disagreed with the resolved target.
    pub crypto_squashes: u64,
    pub noncrypto_squashes: u64,
    pub injected_squashes: u64,
    pub btu_hits: u64,
    pub btu_misses: u64,
    pub btu_evictions: u64,
    /// Untraced crypto branches (stream loops) that held fetch until resolved.
    pub stream_loop_stalls: u64,
    pub integrity_rejections: u64,
    /// Cycles in which fetch did nothing.
    pub fetch_idle_cycles: u64,
}

impl SimStats {
    pub fn squashes(&self) -> u64 {
        self.crypto_squashes + self.noncrypto_squashes
    }

    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        let rows: [(&str, u64); 12] = [
            ("cycles", self.cycles),
            ("fetched", self.fetched),
            ("committed", self.committed),
            ("crypto_squashes", self.crypto_squashes),
            ("noncrypto_squashes", self.noncrypto_squashes),
            ("injected_squashes", self.injected_squashes),
            ("btu_hits", self.btu_hits),
            ("btu_misses", self.btu_misses),
            ("btu_evictions", self.btu_evictions),
            ("stream_loop_stalls", self.stream_loop_stalls),
            ("integrity_rejections", self.integrity_rejections),
            ("fetch_idle_cycles", self.fetch_idle_cycles),
        ];
        rows.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("bundle was generated for program {found:#018x}, not {expected:#018x}")]
    BundleMismatch { expected: u64, found: u64 },
    #[error("simulation exceeded {0} cycles")]
    StepBudgetExceeded(u64),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Btu(#[from] BtuError),
    #[error(transparent)]
    Uasm(#[from] UasmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub stats: SimStats,
    /// Committed pc stream.
    pub committed: Vec<Pc>,
    pub predictor: Predictor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Branch {
    predicted: Pc,
    /// Resolved target; `None` on the wrong path.
    actual: Option<Pc>,
    resolved: bool,
    /// Made a trace unit lookup that must be committed or squashed.
    btu: bool,
    /// Fetch waits for this branch.
    holds_fetch: bool,
    /// Trains the predictor when it resolves.
    trains: bool,
    target: Option<Pc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Item {
    id: u64,
    pc: Pc,
    /// Index into the sequential steps; `None` on the wrong path.
    step: Option<usize>,
    ready_at: u64,
    branch: Option<Branch>,
}

impl Item {
    fn mispredicted(&self) -> bool {
        self.branch.is_some_and(|b| b.actual.is_some_and(|a| a != b.predicted))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Front {
    /// Next correct-path step to fetch.
    Correct(usize),
    Wrong(Pc),
    WrongStopped,
    Waiting(u64),
}

struct Sim<'a> {
    p: &'a Program,
    steps: &'a [Step],
    bundle: &'a TraceBundle,
    cfg: &'a PipelineConfig,
    mode: Mode,
    range: (Pc, Pc),
    cycle: u64,
    rob: VecDeque<Item>,
    front: Front,
    blocked_until: u64,
    next_id: u64,
    btu: BtuState,
    pred: Predictor,
    stats: SimStats,
    committed: Vec<Pc>,
}

enum Fetched {
    Continue,
    /// Nothing more this cycle.
    Stop,
}

impl Sim<'_> {
    fn crypto(&self, pc: Pc) -> bool {
        (self.range.0..self.range.1).contains(&pc)
    }

    fn push(&mut self, pc: Pc, step: Option<usize>, branch: Option<Branch>) {
        let latency = if branch.is_some() { self.cfg.resolve_latency } else { 1 };
        self.rob.push_back(Item { id: self.next_id, pc, step, ready_at: self.cycle + latency, branch });
        self.next_id += 1;
        self.stats.fetched += 1;
    }

    /// Predictor-side target of a branch outside the trace unit's care.
    fn predict(&self, pc: Pc, instr: &Instr) -> Option<Pc> {
        match instr {
            Instr::Beqz { target, .. } => Some(if self.pred.predict_taken(pc) { *target } else { pc + 1 }),
            Instr::Call { target } => Some(*target),
            Instr::Assign { .. } => Some(self.pred.predict_target(pc).unwrap_or(pc + 1)),
            // returns are predicted perfectly on the correct path only
            _ => None,
        }
    }

    fn squash_after(&mut self, k: usize) -> Result<(), SimError> {
        while self.rob.len() > k + 1 {
            let it = self.rob.pop_back().expect("longer than k + 1");
            if it.branch.is_some_and(|b| b.btu) {
                self.btu.squash(it.pc)?;
            }
        }
        self.blocked_until = self.cycle + self.cfg.redirect_penalty;
        Ok(())
    }

    fn resolve(&mut self) -> Result<(), SimError> {
        let mut i = 0;
        while i < self.rob.len() {
            let it = self.rob[i];
            let Some(mut b) = it.branch else {
                i += 1;
                continue;
            };
            if b.resolved || it.ready_at > self.cycle {
                i += 1;
                continue;
            }
            b.resolved = true;
            self.rob[i].branch = Some(b);
            let (Some(actual), Some(step)) = (b.actual, it.step) else {
                i += 1;
                continue;
            };
            if b.trains {
                match self.steps[step].branch {
                    Some(BranchKind::Conditional) => self.pred.train(it.pc, Some(actual) == b.target),
                    Some(BranchKind::Indirect) => self.pred.train_target(it.pc, actual),
                    _ => {}
                }
            }
            if actual != b.predicted {
                if b.btu || (self.mode == Mode::Cassandra && self.crypto(it.pc)) {
                    self.stats.crypto_squashes += 1;
                } else {
                    self.stats.noncrypto_squashes += 1;
                }
                self.squash_after(i)?;
                self.front = Front::Correct(step + 1);
                return Ok(());
            }
            if b.holds_fetch && self.front == Front::Waiting(it.id) {
                self.front = Front::Correct(step + 1);
            }
            i += 1;
        }
        Ok(())
    }

    fn commit(&mut self) -> Result<(), SimError> {
        for _ in 0..self.cfg.fetch_width {
            let Some(head) = self.rob.front() else { break };
            let done = head.ready_at <= self.cycle && head.branch.is_none_or(|b| b.resolved);
            if !done {
                break;
            }
            let it = self.rob.pop_front().expect("head exists");
            debug_assert!(it.step.is_some(), "wrong-path instruction reached commit");
            if it.branch.is_some_and(|b| b.btu) {
                self.btu.commit(it.pc)?;
            }
            self.committed.push(it.pc);
            self.stats.committed += 1;
        }
        Ok(())
    }

    fn inject(&mut self, rng: &mut ChaCha8Rng) -> Result<(), SimError> {
        if self.cfg.squash_injection == 0.0 || !rng.gen_bool(self.cfg.squash_injection) {
            return Ok(());
        }
        let limit = self.rob.iter().position(|it| it.step.is_none() || it.mispredicted()).unwrap_or(self.rob.len());
        if limit == 0 {
            return Ok(());
        }
        let k = rng.gen_range(0..limit);
        let it = self.rob[k];
        self.squash_after(k)?;
        self.front = match it.branch {
            Some(b) if b.holds_fetch && !b.resolved => Front::Waiting(it.id),
            _ => Front::Correct(it.step.expect("correct path") + 1),
        };
        self.stats.injected_squashes += 1;
        Ok(())
    }

    fn fetch_correct(&mut self, i: usize) -> Result<Fetched, SimError> {
        let step = self.steps[i];
        let pc = step.pc;
        let t = &self.p.instrs[pc as usize];
        let Some(kind) = t.instr.branch_kind() else {
            self.push(pc, Some(i), None);
            self.front = Front::Correct(i + 1);
            return Ok(Fetched::Continue);
        };
        let actual = step.next_pc;
        let target = match t.instr {
            Instr::Beqz { target, .. } => Some(target),
            _ => None,
        };
        let mut b = Branch {
            predicted: actual,
            actual: Some(actual),
            resolved: false,
            btu: false,
            holds_fetch: false,
            trains: false,
            target,
        };
        if self.mode == Mode::Cassandra && self.crypto(pc) {
            let Some(rec) = self.bundle.record(pc) else {
                b.holds_fetch = true;
                self.push(pc, Some(i), Some(b));
                self.front = Front::Waiting(self.next_id - 1);
                self.stats.stream_loop_stalls += 1;
                return Ok(Fetched::Stop);
            };
            match self.btu.lookup(pc, rec.hint, self.cycle, self.cfg.fill_latency)? {
                Lookup::Redirect(next) => {
                    b.predicted = next;
                    b.btu = !rec.is_single_target();
                }
                Lookup::Miss | Lookup::Stall => return Ok(Fetched::Stop),
            }
        } else {
            b.trains = matches!(kind, BranchKind::Conditional | BranchKind::Indirect);
            b.predicted = self.predict(pc, &t.instr).unwrap_or(actual);
            let guessed = matches!(kind, BranchKind::Conditional | BranchKind::Indirect);
            if self.mode == Mode::Cassandra && self.cfg.integrity_check && guessed && self.crypto(b.predicted) {
                b.predicted = actual;
                b.holds_fetch = true;
                self.push(pc, Some(i), Some(b));
                self.front = Front::Waiting(self.next_id - 1);
                self.stats.integrity_rejections += 1;
                return Ok(Fetched::Stop);
            }
        }
        let predicted = b.predicted;
        self.push(pc, Some(i), Some(b));
        self.front = if predicted == actual { Front::Correct(i + 1) } else { Front::Wrong(predicted) };
        Ok(Fetched::Continue)
    }

    fn fetch_wrong(&mut self, pc: Pc) -> Result<Fetched, SimError> {
        let Some(t) = self.p.get(pc) else {
            self.front = Front::WrongStopped;
            return Ok(Fetched::Stop);
        };
        let Some(kind) = t.instr.branch_kind() else {
            self.push(pc, None, None);
            self.front = Front::Wrong(pc + 1);
            return Ok(Fetched::Continue);
        };
        let next = if self.mode == Mode::Cassandra && self.crypto(pc) {
            match self.bundle.record(pc) {
                Some(rec) => match self.btu.lookup(pc, rec.hint, self.cycle, self.cfg.fill_latency)? {
                    Lookup::Redirect(n) => Some((n, !rec.is_single_target())),
                    _ => None,
                },
                None => None,
            }
        } else {
            let guessed = matches!(kind, BranchKind::Conditional | BranchKind::Indirect);
            self.predict(pc, &t.instr)
                .filter(|&n| !(self.mode == Mode::Cassandra && self.cfg.integrity_check && guessed && self.crypto(n)))
                .map(|n| (n, false))
        };
        let Some((next, btu)) = next else {
            self.front = Front::WrongStopped;
            return Ok(Fetched::Stop);
        };
        let b = Branch {
            predicted: next,
            actual: None,
            resolved: false,
            btu,
            holds_fetch: false,
            trains: false,
            target: None,
        };
        self.push(pc, None, Some(b));
        self.front = Front::Wrong(next);
        Ok(Fetched::Continue)
    }

    fn fetch(&mut self) -> Result<(), SimError> {
        if self.cycle < self.blocked_until {
            self.stats.fetch_idle_cycles += 1;
            return Ok(());
        }
        let mut fetched = 0;
        while fetched < self.cfg.fetch_width && self.rob.len() < self.cfg.rob_size {
            let r = match self.front {
                Front::Correct(i) if i < self.steps.len() => self.fetch_correct(i)?,
                Front::Wrong(pc) => self.fetch_wrong(pc)?,
                _ => break,
            };
            if matches!(r, Fetched::Stop) {
                if matches!(self.front, Front::Waiting(_)) {
                    fetched += 1;
                }
                break;
            }
            fetched += 1;
        }
        if fetched == 0 {
            self.stats.fetch_idle_cycles += 1;
        }
        Ok(())
    }

    fn done(&self) -> bool {
        self.rob.is_empty() && matches!(self.front, Front::Correct(i) if i >= self.steps.len())
    }
}

/// Runs `p` from `s0` through the pipeline model.
pub fn simulate(
    p: &Program,
    s0: &ArchState,
    bundle: &TraceBundle,
    cfg: &PipelineConfig,
    mode: Mode,
) -> Result<SimResult, SimError> {
    cfg.validate()?;
    if bundle.program_hash != p.hash() {
        return Err(SimError::BundleMismatch { expected: p.hash(), found: bundle.program_hash });
    }
    let seq = run_seq(p, s0, cfg.step_budget)?;
    let geometry = BtuGeometry { entries: cfg.btu_entries, ways: cfg.btu_ways };
    let mut btu = BtuState::new(geometry, &bundle.records)?;
    if cfg.preload_btu && mode == Mode::Cassandra {
        btu.preload()?;
    }
    let mut sim = Sim {
        p,
        steps: &seq.steps,
        bundle,
        cfg,
        mode,
        range: cfg.crypto_range.unwrap_or(bundle.crypto_range),
        cycle: 0,
        rob: VecDeque::with_capacity(cfg.rob_size),
        front: Front::Correct(0),
        blocked_until: 0,
        next_id: 0,
        btu,
        pred: Predictor::new(cfg.predictor),
        stats: SimStats::default(),
        committed: Vec::with_capacity(seq.steps.len()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    while !sim.done() {
        if sim.cycle >= cfg.max_cycles {
            return Err(SimError::StepBudgetExceeded(cfg.max_cycles));
        }
        sim.resolve()?;
        sim.commit()?;
        sim.inject(&mut rng)?;
        sim.btu.advance(sim.cycle)?;
        sim.fetch()?;
        sim.cycle += 1;
    }
    let mut stats = sim.stats;
    stats.cycles = sim.cycle;
    stats.btu_hits = sim.btu.counters.hits;
    stats.btu_misses = sim.btu.counters.misses;
    stats.btu_evictions = sim.btu.counters.evictions;
    Ok(SimResult { stats, committed: sim.committed, predictor: sim.pred })
}
