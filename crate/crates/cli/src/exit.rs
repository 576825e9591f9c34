//! Process exit codes, one per error category.

use hdrlift_core::Error;

pub const OK: u8 = 0;
pub const OTHER: u8 = 1;
/// Reserved for command-line usage errors reported by the argument parser.
pub const USAGE: u8 = 2;
pub const CONFIG: u8 = 3;
pub const DATA: u8 = 4;
pub const CHECKPOINT: u8 = 5;
pub const NUMERIC: u8 = 6;
pub const ADAPTER: u8 = 7;
pub const EVALUATION: u8 = 8;
pub const SHAPE: u8 = 9;

pub fn code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => CONFIG,
        Error::Rgbe(_)
        | Error::RawFloat(_)
        | Error::InvalidImage(_)
        | Error::Data(_)
        | Error::Split(_)
        | Error::Io { .. }
        | Error::Codec { .. } => DATA,
        Error::Checkpoint(_) => CHECKPOINT,
        Error::NonFinite { .. } | Error::Numeric(_) => NUMERIC,
        Error::Adapter(_) => ADAPTER,
        Error::Evaluation { .. } => EVALUATION,
        Error::Shape(_) | Error::Range(_) => SHAPE,
    }
}

/// Exit code for an error that may wrap a core error.
pub fn code_of(e: &anyhow::Error) -> u8 {
    e.chain().find_map(|c| c.downcast_ref::<Error>()).map(code).unwrap_or(OTHER)
}
