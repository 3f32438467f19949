//! Library side of the `hbnn` command: file formats, run configuration and
//! the experiment drivers behind each subcommand.

pub mod approx;
pub mod commands;
pub mod config;
pub mod formats;
pub mod points;

use std::fmt;

/// Invalid arguments or configuration; maps to exit code 2.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Exit code for a failed command: validation problems are usage errors,
/// everything else (I/O, missing data, numeric failure) is environmental.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<hbnn_core::Error>() {
            return EXIT_USAGE;
        }
        if let Some(t) = cause.downcast_ref::<hbnn_train::TrainError>() {
            return match t {
                hbnn_train::TrainError::Io(_) | hbnn_train::TrainError::Dataset(_) => EXIT_IO,
                hbnn_train::TrainError::NumericFailure { .. } => EXIT_IO,
                _ => EXIT_USAGE,
            };
        }
    }
    EXIT_IO
}
