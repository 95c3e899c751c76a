//! Secret enumeration and the constant-time check.

use serde::{Deserialize, Serialize};

use super::ast::{Cell, InputSpec, Program};
use super::exec::{contract_trace_ct_seq, run_seq, ArchState, ContractTrace};
use super::UasmError;
use crate::par::{map_range, Exec};
use crate::tracegen::{BranchLog, LogRecord};

/// Every assignment of domain values to the program's secret cells, in
/// lexicographic order with the first cell varying slowest.
#[derive(Debug, Clone)]
pub struct SecretDomain {
    pub cells: Vec<Cell>,
    pub values: Vec<u64>,
}

impl SecretDomain {
    pub fn of(p: &Program) -> Self {
        Self { cells: p.secrets.clone(), values: p.domain.clone() }
    }

    pub fn len(&self) -> usize {
        self.values.len().checked_pow(self.cells.len() as u32).expect("secret domain too large")
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn assignment(&self, mut index: usize) -> Vec<(Cell, u64)> {
        let n = self.values.len();
        let mut out = vec![(Cell::Mem(0), 0); self.cells.len()];
        for (slot, &c) in out.iter_mut().zip(&self.cells).rev() {
            *slot = (c, self.values[index % n]);
            index /= n;
        }
        out
    }

    pub fn apply(&self, base: &ArchState, index: usize) -> ArchState {
        let mut s = base.clone();
        for (c, v) in self.assignment(index) {
            s.set(c, v);
        }
        s
    }
}

/// Two secret assignments under the same public input with different contract traces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtViolation {
    pub input: String,
    pub first: Vec<(Cell, u64)>,
    pub second: Vec<(Cell, u64)>,
    /// Index of the first differing observation (or the shorter length).
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CtVerdict {
    Pass { runs: usize },
    Fail(CtViolation),
}

impl CtVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, CtVerdict::Pass { .. })
    }
}

pub(crate) fn first_difference<T: PartialEq>(a: &[T], b: &[T]) -> Option<usize> {
    a.iter().zip(b).position(|(x, y)| x != y).or((a.len() != b.len()).then(|| a.len().min(b.len())))
}

/// Observation indistinguishability over the whole secret domain, for each
/// public input. With no inputs declared the all-zero state is used.
pub fn ct_check(p: &Program, inputs: &[InputSpec], budget: u64, exec: Exec) -> Result<CtVerdict, UasmError> {
    let dom = SecretDomain::of(p);
    let default_input = [InputSpec { name: "zero".into(), ..Default::default() }];
    let inputs = if inputs.is_empty() { &default_input[..] } else { inputs };
    let mut runs = 0;
    for input in inputs {
        let base = ArchState::from_input(p, input);
        let traces: Vec<Result<ContractTrace, UasmError>> =
            map_range(dom.len(), exec, |i| contract_trace_ct_seq(p, &dom.apply(&base, i), budget));
        let traces = traces.into_iter().collect::<Result<Vec<_>, _>>()?;
        runs += traces.len();
        for (i, t) in traces.iter().enumerate().skip(1) {
            if let Some(position) = first_difference(&traces[0], t) {
                return Ok(CtVerdict::Fail(CtViolation {
                    input: input.name.clone(),
                    first: dom.assignment(0),
                    second: dom.assignment(i),
                    position,
                }));
            }
        }
    }
    Ok(CtVerdict::Pass { runs })
}

/// One record per executed control transfer, indexed by dynamic step.
pub fn emit_branch_log(p: &Program, s0: &ArchState, budget: u64) -> Result<BranchLog, UasmError> {
    let run = run_seq(p, s0, budget)?;
    let records = run
        .steps
        .iter()
        .enumerate()
        .filter_map(|(i, st)| {
            st.branch.map(|kind| LogRecord { index: i as u64, kind, branch_pc: st.pc, target_pc: st.next_pc })
        })
        .collect();
    Ok(BranchLog { records })
}
