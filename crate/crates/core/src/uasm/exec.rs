//! Sequential architectural semantics and the constant-time contract.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ast::*;
use super::UasmError;
use crate::trace::Pc;

pub const DEFAULT_STEP_BUDGET: u64 = 1_000_000;

/// Memory, registers and the return-address stack backing `call`/`ret`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchState {
    pub mem: BTreeMap<u64, u64>,
    /// Indexed by [`Reg`]; `regs[PC]` is the program counter.
    pub regs: Vec<u64>,
    pub stack: Vec<Pc>,
}

impl ArchState {
    pub fn new(p: &Program) -> Self {
        Self { mem: BTreeMap::new(), regs: vec![0; p.regs.len()], stack: Vec::new() }
    }

    /// Initial state for a named input. Unset cells are zero.
    pub fn from_input(p: &Program, input: &InputSpec) -> Self {
        let mut s = Self::new(p);
        s.mem.extend(input.mem.iter().map(|(&a, &v)| (a, v)));
        for (&r, &v) in &input.regs {
            s.regs[r] = v;
        }
        s
    }

    pub fn pc(&self) -> Pc {
        self.regs[PC]
    }

    pub fn load(&self, addr: u64) -> u64 {
        self.mem.get(&addr).copied().unwrap_or(0)
    }

    pub fn store(&mut self, addr: u64, v: u64) {
        if v == 0 {
            self.mem.remove(&addr);
        } else {
            self.mem.insert(addr, v);
        }
    }

    pub fn get(&self, c: Cell) -> u64 {
        match c {
            Cell::Mem(a) => self.load(a),
            Cell::Reg(r) => self.regs[r],
        }
    }

    pub fn set(&mut self, c: Cell, v: u64) {
        match c {
            Cell::Mem(a) => self.store(a, v),
            Cell::Reg(r) => self.regs[r] = v,
        }
    }

    pub fn is_halted(&self, p: &Program) -> bool {
        self.pc() == p.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObsKind {
    /// Control transfer to `n`.
    Pc(u64),
    /// Call of the function whose entry is `f`.
    Call(Pc),
    /// Return to `n`.
    Ret(u64),
    Load(u64),
    Store(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Observation {
    pub kind: ObsKind,
    pub crypto: bool,
}

impl Observation {
    pub fn is_control_flow(&self) -> bool {
        matches!(self.kind, ObsKind::Pc(_) | ObsKind::Call(_) | ObsKind::Ret(_))
    }

    /// The pc execution continues at, for control-flow observations.
    pub fn next_pc(&self) -> Option<Pc> {
        match self.kind {
            ObsKind::Pc(n) | ObsKind::Call(n) | ObsKind::Ret(n) => Some(n),
            _ => None,
        }
    }
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ObsKind::Pc(n) => write!(f, "pc {n}"),
            ObsKind::Call(n) => write!(f, "call {n}"),
            ObsKind::Ret(n) => write!(f, "ret {n}"),
            ObsKind::Load(n) => write!(f, "load {n}"),
            ObsKind::Store(n) => write!(f, "store {n}"),
        }?;
        if self.crypto {
            f.write_str(" @c")?;
        }
        Ok(())
    }
}

pub type ContractTrace = Vec<Observation>;

/// What one sequential step did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub pc: Pc,
    pub next_pc: Pc,
    pub obs: Option<Observation>,
    pub branch: Option<BranchKind>,
}

fn eval(e: &Expr, s: &ArchState, pc: Pc) -> u64 {
    e.eval(&mut |r| if r == PC { pc } else { s.regs[r] })
}

/// One step of the sequential semantics. `pc` of a halted state is an error.
pub fn step_arch(p: &Program, s: &mut ArchState) -> Result<Step, UasmError> {
    let pc = s.pc();
    let t = p.get(pc).ok_or(UasmError::InvalidAddress(pc))?;
    let obs = |kind| Some(Observation { kind, crypto: t.crypto });
    let mut next = pc + 1;
    let o = match &t.instr {
        Instr::Assign { dst: PC, expr } => {
            next = eval(expr, s, pc);
            obs(ObsKind::Pc(next))
        }
        Instr::Assign { dst, expr } => {
            s.regs[*dst] = eval(expr, s, pc);
            None
        }
        Instr::Load { dst, addr } => {
            let a = eval(addr, s, pc);
            s.regs[*dst] = s.load(a);
            obs(ObsKind::Load(a))
        }
        Instr::Store { src, addr } => {
            let a = eval(addr, s, pc);
            let v = if *src == PC { pc } else { s.regs[*src] };
            s.store(a, v);
            obs(ObsKind::Store(a))
        }
        Instr::Beqz { cond, target } => {
            let v = if *cond == PC { pc } else { s.regs[*cond] };
            if v == 0 {
                next = *target;
            }
            obs(ObsKind::Pc(next))
        }
        Instr::Call { target } => {
            s.stack.push(pc + 1);
            next = *target;
            obs(ObsKind::Call(*target))
        }
        Instr::Ret => {
            // Returning from the outermost frame ends the program.
            next = s.stack.pop().unwrap_or(p.end());
            obs(ObsKind::Ret(next))
        }
    };
    if next > p.end() {
        return Err(UasmError::InvalidAddress(next));
    }
    s.regs[PC] = next;
    Ok(Step { pc, next_pc: next, obs: o, branch: t.instr.branch_kind() })
}

/// Runs to completion, handing every step to `on_step`.
pub fn run_with(p: &Program, s: &mut ArchState, budget: u64, mut on_step: impl FnMut(&Step)) -> Result<u64, UasmError> {
    let mut n = 0;
    while !s.is_halted(p) {
        if n == budget {
            return Err(UasmError::StepBudgetExceeded(budget));
        }
        let st = step_arch(p, s)?;
        on_step(&st);
        n += 1;
    }
    Ok(n)
}

/// Everything a sequential run produces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqRun {
    pub steps: Vec<Step>,
    pub final_state: ArchState,
}

impl SeqRun {
    pub fn contract_trace(&self) -> ContractTrace {
        self.steps.iter().filter_map(|s| s.obs).collect()
    }

    /// Crypto control-flow observations, in order.
    pub fn crypto_cf_trace(&self) -> Vec<Observation> {
        self.steps.iter().filter_map(|s| s.obs).filter(|o| o.crypto && o.is_control_flow()).collect()
    }

    /// `(branch pc, target)` of every executed control transfer.
    pub fn branch_outcomes(&self) -> impl Iterator<Item = (BranchKind, Pc, Pc)> + '_ {
        self.steps.iter().filter_map(|s| s.branch.map(|k| (k, s.pc, s.next_pc)))
    }

    /// The pcs of all executed instructions, in order.
    pub fn pc_stream(&self) -> Vec<Pc> {
        self.steps.iter().map(|s| s.pc).collect()
    }
}

pub fn run_seq(p: &Program, s0: &ArchState, budget: u64) -> Result<SeqRun, UasmError> {
    let mut s = s0.clone();
    let mut steps = Vec::new();
    run_with(p, &mut s, budget, |st| steps.push(*st))?;
    Ok(SeqRun { steps, final_state: s })
}

pub fn contract_trace_ct_seq(p: &Program, s0: &ArchState, budget: u64) -> Result<ContractTrace, UasmError> {
    let mut s = s0.clone();
    let mut out = Vec::new();
    run_with(p, &mut s, budget, |st| out.extend(st.obs))?;
    Ok(out)
}

pub fn crypto_cf_trace(p: &Program, s0: &ArchState, budget: u64) -> Result<Vec<Observation>, UasmError> {
    let mut s = s0.clone();
    let mut out = Vec::new();
    run_with(p, &mut s, budget, |st| {
        out.extend(st.obs.filter(|o| o.crypto && o.is_control_flow()));
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uasm::parse;

    #[test]
    fn assign_advances() {
        let p = parse("assign x, 3\nret").unwrap();
        let mut s = ArchState::new(&p);
        let st = step_arch(&p, &mut s).unwrap();
        assert_eq!(s.regs[1], 3);
        assert_eq!(s.pc(), 1);
        assert_eq!(st.obs, None);
    }

    #[test]
    fn beqz_taken_on_zero() {
        let p = parse("beqz x, 2\nassign y, 1\nassign y, 2").unwrap();
        let mut s = ArchState::new(&p);
        let st = step_arch(&p, &mut s).unwrap();
        assert_eq!(s.pc(), 2);
        assert_eq!(st.obs, Some(Observation { kind: ObsKind::Pc(2), crypto: false }));
        let mut s = ArchState::new(&p);
        s.regs[1] = 5;
        step_arch(&p, &mut s).unwrap();
        assert_eq!(s.pc(), 1);
    }

    #[test]
    fn counted_loop_outcomes() {
        // Four iterations: the back edge is taken four times, then falls through.
        let p = parse("assign i, 4\ntop: assign i, i - 1\nassign d, i == 0\nbeqz d, top @c\nret").unwrap();
        let run = run_seq(&p, &ArchState::new(&p), 100).unwrap();
        let outs: Vec<_> = run.branch_outcomes().filter(|o| o.1 == 3).map(|o| o.2).collect();
        assert_eq!(outs, vec![1, 1, 1, 4]);
        assert_eq!(run.crypto_cf_trace().len(), 4);
    }

    #[test]
    fn load_observation() {
        let p = parse("load x, 9").unwrap();
        let t = contract_trace_ct_seq(&p, &ArchState::new(&p), 10).unwrap();
        assert_eq!(t, vec![Observation { kind: ObsKind::Load(9), crypto: false }]);
        let empty = parse("").unwrap();
        assert!(contract_trace_ct_seq(&empty, &ArchState::new(&empty), 10).unwrap().is_empty());
    }

    #[test]
    fn call_and_ret_use_the_stack() {
        let p = parse("call f\njmp &end\nf: ret\nend: ret").unwrap();
        let run = run_seq(&p, &ArchState::new(&p), 10).unwrap();
        let kinds: Vec<_> = run.contract_trace().iter().map(|o| o.kind).collect();
        assert_eq!(kinds, vec![ObsKind::Call(2), ObsKind::Ret(1), ObsKind::Pc(3), ObsKind::Ret(4)]);
    }

    #[test]
    fn budget_and_bad_targets() {
        let p = parse("top: jmp &top").unwrap();
        assert_eq!(run_seq(&p, &ArchState::new(&p), 50), Err(UasmError::StepBudgetExceeded(50)));
        let p = parse("jmp 99").unwrap();
        assert_eq!(run_seq(&p, &ArchState::new(&p), 50), Err(UasmError::InvalidAddress(99)));
    }
}
