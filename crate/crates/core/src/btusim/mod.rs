//! Trace unit model and the pipeline simulator around it.

mod btu;
mod pipeline;

pub use btu::{replay_record, BtuCounters, BtuEntry, BtuError, BtuGeometry, BtuState, Fill, Lookup, WindowSlot};
pub use pipeline::{simulate, Mode, PipelineConfig, SimError, SimResult, SimStats};
