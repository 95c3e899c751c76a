use thiserror::Error;

/// Errors raised by the trace data layer: compression, element packing and
/// the on-disk bundle.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("trace is empty")]
    EmptyTrace,
    #[error("k-mer length {k} exceeds sequence length {len}")]
    KTooLarge { k: usize, len: usize },
    #[error("symbol {0} has neither a pattern nor a base mapping")]
    DanglingSymbol(u32),
    #[error("compacted pattern store needs {needed} elements, capacity is {capacity}")]
    CapacityExceeded { needed: usize, capacity: usize },
    #[error("{what} value {value} does not fit in 16 bits")]
    CounterOverflow { what: &'static str, value: u64 },
    #[error("target offset {0} does not fit in a signed 12-bit field")]
    OffsetOverflow(i64),
    #[error("hint value {0:#06x} is not a valid 14-bit hint")]
    InvalidHint(u16),
    #[error("malformed bundle: {0}")]
    MalformedBundle(String),
}

pub type Result<T, E = TraceError> = std::result::Result<T, E>;
