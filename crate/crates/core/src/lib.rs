//! Branch-trace compression and replay for constant-time code.
//!
//! The crate covers the offline side (compressing the control flow of a
//! program's crypto region into a [`bundle::TraceBundle`]), a cycle-level model
//! of the trace unit that replays those traces at fetch, and two executable
//! semantics with a bounded hardware noninterference checker.

pub mod btusim;
pub mod bundle;
pub mod compression;
pub mod corpus;
pub mod element;
pub mod error;
pub mod hwsem;
pub mod par;
pub mod predictor;
pub mod testgen;
pub mod trace;
pub mod tracegen;
pub mod uasm;

pub use error::{Result, TraceError};
pub use trace::{Pc, Symbol};
