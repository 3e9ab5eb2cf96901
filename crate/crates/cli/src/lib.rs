//! Experiment orchestration for `hdistill`: run configs, metrics logs and
//! the subcommands behind the binary.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod commands;
pub mod config;
pub mod metrics;

pub use config::{Objective, Precision, RunConfig};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// I/O and other runtime failures.
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const NUMERIC: i32 = 3;
    pub const FORMAT: i32 = 4;
}

/// Maps an error chain to an exit code via the first library error in it.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use hdistill_core::Error;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFinite { .. } => exit::NUMERIC,
                Error::Format(_) | Error::FormatVersion { .. } | Error::Json(_) => exit::FORMAT,
                Error::Io(_) => exit::FAILURE,
                Error::Config { .. }
                | Error::Contract(_)
                | Error::Asymmetric(_)
                | Error::Frozen
                | Error::Shape { .. }
                | Error::Index { .. } => exit::USAGE,
            };
        }
        if cause.downcast_ref::<clap::Error>().is_some() {
            return exit::USAGE;
        }
    }
    exit::FAILURE
}
