//! Executable hardware semantics for the replay defense and a predictor
//! baseline, with a bounded noninterference checker.

pub mod components;
pub mod hni;
pub mod machine;

pub use components::{Access, Cache, Directive, Line, LruSet, Scheduler, TraceCache};
pub use hni::{
    adversary_project, check_hni, hw_run, hw_run_with, secret_states, Counterexample, HniVerdict, HwRun, HwSummary,
    LabeledState, Projection,
};
pub use machine::{
    examine, hw_step, project_buf, EntryKind, HwConfig, HwError, HwParams, LoadState, Marker, RobEntry, StepEffect,
    Variant,
};
