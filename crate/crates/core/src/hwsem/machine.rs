//! Out-of-order hardware semantics over a reorder buffer.
//!
//! Each step performs the scheduler's directive. Fetch appends one entry,
//! execute resolves the oldest ready entry, commit retires a resolved head.
//! The Cassandra variant takes tagged control flow from the contract's crypto
//! control-flow trace and stalls untagged control flow until the buffer is
//! resolved. The baseline variant predicts every branch and squashes on
//! misprediction.

use serde::{Deserialize, Serialize};

use super::components::{Access, Cache, Directive, Line, Scheduler, TraceCache};
use crate::predictor::{Predictor, PredictorKind};
use crate::trace::Pc;
use crate::uasm::{ArchState, BranchKind, Expr, Instr, Observation, Program, Reg, UasmError, PC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Cassandra,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HwParams {
    /// Reorder buffer capacity B.
    pub rob_size: usize,
    pub cache_lines: usize,
    pub trace_cache_entries: usize,
    /// Steps a load waits after a data-cache miss.
    pub miss_latency: u32,
    pub predictor: PredictorKind,
    pub budget: u64,
    /// Include the scheduler state in the adversary's view.
    pub observe_scheduler: bool,
}

impl Default for HwParams {
    fn default() -> Self {
        Self {
            rob_size: 8,
            cache_lines: 32,
            trace_cache_entries: 4,
            miss_latency: 6,
            predictor: PredictorKind::TwoBit,
            budget: 1_000_000,
            observe_scheduler: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HwError {
    #[error("crypto control-flow trace exhausted at observation {0}")]
    TraceExhausted(usize),
    #[error("hardware step budget of {0} exhausted")]
    StepBudgetExceeded(u64),
    #[error(transparent)]
    Uasm(#[from] UasmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LoadState {
    Pending,
    Waiting { value: u64, left: u32 },
    Done { value: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntryKind {
    Assign {
        dst: Reg,
        value: Option<u64>,
    },
    Load {
        dst: Reg,
        state: LoadState,
    },
    Store {
        done: Option<(u64, u64)>,
    },
    /// Control transfer; `next_pc` of the entry is its (predicted) target.
    Jump {
        kind: BranchKind,
        resolved: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RobEntry {
    pub pc: Pc,
    pub next_pc: Pc,
    pub kind: EntryKind,
}

impl RobEntry {
    pub fn resolved(&self) -> bool {
        match &self.kind {
            EntryKind::Assign { value, .. } => value.is_some(),
            EntryKind::Load { state, .. } => matches!(state, LoadState::Done { .. }),
            EntryKind::Store { done } => done.is_some(),
            EntryKind::Jump { resolved, .. } => *resolved,
        }
    }

    fn dst(&self) -> Option<Reg> {
        match self.kind {
            EntryKind::Assign { dst, .. } | EntryKind::Load { dst, .. } => Some(dst),
            _ => None,
        }
    }

    fn value(&self) -> Option<u64> {
        match self.kind {
            EntryKind::Assign { value, .. } => value,
            EntryKind::Load { state: LoadState::Done { value }, .. } => Some(value),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Marker {
    R,
    UR,
}

/// Data-independent view of the buffer.
pub fn project_buf(buf: &[RobEntry]) -> Vec<Marker> {
    buf.iter().map(|e| if e.resolved() { Marker::R } else { Marker::UR }).collect()
}

pub fn examine(proj: &[Marker]) -> Marker {
    if proj.iter().all(|&m| m == Marker::R) {
        Marker::R
    } else {
        Marker::UR
    }
}

/// Hardware configuration ⟨m, a, C, buf, cs, tc, sc⟩ plus the baseline's predictor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HwConfig {
    pub arch: ArchState,
    pub c: usize,
    pub buf: Vec<RobEntry>,
    pub cs: Cache,
    pub tc: TraceCache,
    pub sc: Scheduler,
    pub pred: Predictor,
}

impl HwConfig {
    pub fn new(arch: ArchState, params: &HwParams) -> Self {
        Self {
            arch,
            c: 0,
            buf: Vec::new(),
            cs: Cache::new(params.cache_lines),
            tc: TraceCache::new(params.trace_cache_entries),
            sc: Scheduler::default(),
            pred: Predictor::new(params.predictor),
        }
    }

    pub fn is_done(&self, p: &Program) -> bool {
        self.buf.is_empty() && self.arch.is_halted(p)
    }

    fn fetch_pc(&self) -> Pc {
        self.buf.last().map_or(self.arch.pc(), |e| e.next_pc)
    }

    /// Value of `r` as seen by entry `j`: the youngest older writer, or the
    /// committed register. `None` while that writer is unresolved.
    fn operand(&self, j: usize, r: Reg) -> Option<u64> {
        if r == PC {
            return Some(self.buf.get(j).map_or_else(|| self.fetch_pc(), |e| e.pc));
        }
        match self.buf[..j].iter().rev().find(|e| e.dst() == Some(r)) {
            Some(e) => e.value(),
            None => Some(self.arch.regs[r]),
        }
    }

    fn eval(&self, j: usize, e: &Expr) -> Option<u64> {
        let mut ok = true;
        let v = e.eval(&mut |r| {
            self.operand(j, r).unwrap_or_else(|| {
                ok = false;
                0
            })
        });
        ok.then_some(v)
    }

    /// Return-address stack after applying every buffered call and return.
    fn speculative_stack(&self) -> Vec<Pc> {
        let mut st = self.arch.stack.clone();
        for e in &self.buf {
            match e.kind {
                EntryKind::Jump { kind: BranchKind::Call, .. } => st.push(e.pc + 1),
                EntryKind::Jump { kind: BranchKind::Return, .. } => {
                    st.pop();
                }
                _ => {}
            }
        }
        st
    }

    fn ready(&self, p: &Program, j: usize) -> bool {
        let e = &self.buf[j];
        if e.resolved() {
            return false;
        }
        let instr = &p.instrs[e.pc as usize].instr;
        let operands = instr.sources().iter().all(|&r| self.operand(j, r).is_some());
        match &e.kind {
            EntryKind::Load { state, .. } => {
                // No data-flow speculation: loads wait for every older store.
                *state == LoadState::Pending
                    && operands
                    && self.buf[..j].iter().all(|o| !matches!(o.kind, EntryKind::Store { done: None }))
            }
            _ => operands,
        }
    }

    fn update_scheduler(&mut self, p: &Program) {
        let head = self.buf.first().is_some_and(RobEntry::resolved);
        let ready = (0..self.buf.len()).any(|j| self.ready(p, j));
        self.sc = self.sc.update(head, ready);
    }
}

/// What a step did, for statistics and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepEffect {
    Fetched(Pc),
    InsnMiss(Pc),
    TraceMiss(Pc),
    Stalled,
    Idle,
    Executed(Pc),
    Squashed { branch_pc: Pc, tagged: bool },
    Committed(Pc),
}

/// One step of the chosen semantics. `cf` is the crypto control-flow trace.
pub fn hw_step(
    p: &Program,
    w: &mut HwConfig,
    cf: &[Observation],
    variant: Variant,
    params: &HwParams,
) -> Result<StepEffect, HwError> {
    // Outstanding misses make progress every step.
    for e in &mut w.buf {
        if let EntryKind::Load { state, .. } = &mut e.kind {
            if let LoadState::Waiting { value, left } = *state {
                *state =
                    if left <= 1 { LoadState::Done { value } } else { LoadState::Waiting { value, left: left - 1 } };
            }
        }
    }
    let eff = match w.sc.next() {
        Directive::Fetch => fetch(p, w, cf, variant, params)?,
        Directive::Execute => execute(p, w, params),
        Directive::Commit => commit(w),
    };
    w.update_scheduler(p);
    Ok(eff)
}

fn fetch(
    p: &Program,
    w: &mut HwConfig,
    cf: &[Observation],
    variant: Variant,
    params: &HwParams,
) -> Result<StepEffect, HwError> {
    let i = w.fetch_pc();
    if w.buf.len() >= params.rob_size || i >= p.end() {
        return Ok(StepEffect::Idle);
    }
    let hit = w.cs.access(Line::Insn(i)) == Access::Hit;
    w.cs.update(Line::Insn(i));
    if !hit {
        return Ok(StepEffect::InsnMiss(i));
    }
    let t = &p.instrs[i as usize];
    let Some(kind) = t.instr.branch_kind() else {
        let kind = match &t.instr {
            Instr::Assign { dst, .. } => EntryKind::Assign { dst: *dst, value: None },
            Instr::Load { dst, .. } => EntryKind::Load { dst: *dst, state: LoadState::Pending },
            Instr::Store { .. } => EntryKind::Store { done: None },
            _ => unreachable!("branches handled above"),
        };
        w.buf.push(RobEntry { pc: i, next_pc: i + 1, kind });
        return Ok(StepEffect::Fetched(i));
    };
    let push = |w: &mut HwConfig, next_pc, resolved| {
        w.buf.push(RobEntry { pc: i, next_pc, kind: EntryKind::Jump { kind, resolved } });
        Ok(StepEffect::Fetched(i))
    };
    match variant {
        Variant::Cassandra if t.crypto => {
            let hit = w.tc.access(i) == Access::Hit;
            w.tc.update(i);
            if !hit {
                return Ok(StepEffect::TraceMiss(i));
            }
            let next = cf.get(w.c).and_then(Observation::next_pc).ok_or(HwError::TraceExhausted(w.c))?;
            w.c += 1;
            push(w, next, true)
        }
        Variant::Cassandra => {
            if examine(&project_buf(&w.buf)) == Marker::UR {
                return Ok(StepEffect::Stalled);
            }
            let j = w.buf.len();
            let next = match &t.instr {
                Instr::Beqz { cond, target } => {
                    if w.operand(j, *cond).expect("resolved buffer") == 0 {
                        *target
                    } else {
                        i + 1
                    }
                }
                Instr::Assign { expr, .. } => w.eval(j, expr).expect("resolved buffer"),
                Instr::Call { target } => *target,
                Instr::Ret => w.speculative_stack().last().copied().unwrap_or(p.end()),
                _ => unreachable!(),
            };
            push(w, next, true)
        }
        Variant::Baseline => match &t.instr {
            Instr::Beqz { target, .. } => {
                let next = if w.pred.predict_taken(i) { *target } else { i + 1 };
                push(w, next, false)
            }
            Instr::Assign { .. } => {
                let next = w.pred.predict_target(i).unwrap_or(i + 1);
                push(w, next, false)
            }
            Instr::Call { target } => push(w, *target, true),
            Instr::Ret => {
                let next = w.speculative_stack().last().copied().unwrap_or(p.end());
                push(w, next, true)
            }
            _ => unreachable!(),
        },
    }
}

fn execute(p: &Program, w: &mut HwConfig, params: &HwParams) -> StepEffect {
    let Some(j) = (0..w.buf.len()).find(|&j| w.ready(p, j)) else {
        return StepEffect::Idle;
    };
    let pc = w.buf[j].pc;
    match &p.instrs[pc as usize].instr {
        Instr::Assign { dst, expr } if *dst != PC => {
            let v = w.eval(j, expr).expect("ready");
            w.buf[j].kind = EntryKind::Assign { dst: *dst, value: Some(v) };
        }
        Instr::Load { dst, addr } => {
            let a = w.eval(j, addr).expect("ready");
            let value = w.buf[..j]
                .iter()
                .rev()
                .find_map(|e| match e.kind {
                    EntryKind::Store { done: Some((sa, sv)) } if sa == a => Some(sv),
                    _ => None,
                })
                .unwrap_or_else(|| w.arch.load(a));
            let hit = w.cs.access(Line::Data(a)) == Access::Hit;
            w.cs.update(Line::Data(a));
            let state = if hit || params.miss_latency == 0 {
                LoadState::Done { value }
            } else {
                LoadState::Waiting { value, left: params.miss_latency }
            };
            w.buf[j].kind = EntryKind::Load { dst: *dst, state };
        }
        Instr::Store { src, addr } => {
            let a = w.eval(j, addr).expect("ready");
            let v = w.operand(j, *src).expect("ready");
            w.cs.update(Line::Data(a));
            w.buf[j].kind = EntryKind::Store { done: Some((a, v)) };
        }
        instr => {
            // Unresolved control flow only exists in the baseline.
            let actual = match instr {
                Instr::Beqz { cond, target } => {
                    let taken = w.operand(j, *cond).expect("ready") == 0;
                    w.pred.train(pc, taken);
                    if taken {
                        *target
                    } else {
                        pc + 1
                    }
                }
                Instr::Assign { expr, .. } => {
                    let t = w.eval(j, expr).expect("ready");
                    w.pred.train_target(pc, t);
                    t
                }
                _ => unreachable!("calls and returns resolve at fetch"),
            };
            let e = &mut w.buf[j];
            let EntryKind::Jump { kind, .. } = e.kind else { unreachable!() };
            e.kind = EntryKind::Jump { kind, resolved: true };
            if e.next_pc != actual {
                e.next_pc = actual;
                w.buf.truncate(j + 1);
                return StepEffect::Squashed { branch_pc: pc, tagged: p.instrs[pc as usize].crypto };
            }
        }
    }
    StepEffect::Executed(pc)
}

fn commit(w: &mut HwConfig) -> StepEffect {
    let e = w.buf.remove(0);
    match e.kind {
        EntryKind::Assign { dst, value: Some(v) } => w.arch.regs[dst] = v,
        EntryKind::Load { dst, state: LoadState::Done { value } } => w.arch.regs[dst] = value,
        EntryKind::Store { done: Some((a, v)) } => w.arch.store(a, v),
        EntryKind::Jump { kind: BranchKind::Call, .. } => w.arch.stack.push(e.pc + 1),
        EntryKind::Jump { kind: BranchKind::Return, .. } => {
            w.arch.stack.pop();
        }
        EntryKind::Jump { .. } => {}
        _ => unreachable!("only resolved heads commit"),
    }
    w.arch.regs[PC] = e.next_pc;
    StepEffect::Committed(e.pc)
}
