//! A small assembly language with crypto tags, its sequential semantics and
//! the constant-time (`ct-seq`) contract.

pub mod ast;
pub mod contract;
pub mod exec;
pub mod parse;

pub use ast::{BranchKind, Cell, Expr, InputSpec, Instr, Program, Reg, Tagged, PC};
pub use contract::{ct_check, emit_branch_log, CtVerdict, CtViolation, SecretDomain};
pub use exec::{
    contract_trace_ct_seq, crypto_cf_trace, run_seq, step_arch, ArchState, ContractTrace, ObsKind, Observation, SeqRun,
    Step, DEFAULT_STEP_BUDGET,
};
pub use parse::{parse, ParseError};

use crate::trace::Pc;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum UasmError {
    #[error("parse error: {0}")]
    Parse(#[from] ParseError),
    #[error("control transfer to invalid address {0}")]
    InvalidAddress(Pc),
    #[error("undefined register `{0}`")]
    UndefinedRegister(String),
    #[error("no input named `{0}`")]
    UnknownInput(String),
    #[error("step budget of {0} exhausted")]
    StepBudgetExceeded(u64),
}
