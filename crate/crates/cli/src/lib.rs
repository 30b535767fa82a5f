//! File formats, run configuration and subcommands of the `epiflow` binary.

pub mod commands;
pub mod config;
pub mod io;
pub mod selfcheck;

use epiflow_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_BAD_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_SELFCHECK: i32 = 4;

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Tensor(_) | Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
        _ => EXIT_BAD_INPUT,
    }
}
