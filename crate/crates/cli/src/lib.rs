//! Command-line front end for i-MAE experiments.
//!
//! `imae <command> --config <file> [--set key=value ...]`. Every command writes
//! its outputs and a `manifest.json` under `<out.dir>/<command>/`; `IMAE_OUT`
//! overrides `out.dir`. Failures print one `error[<kind>]: <reason>` line and
//! exit with 2 (configuration), 3 (data) or 4 (numeric failure).

mod commands;
pub mod grid;
pub mod manifest;
pub mod plots;

pub use commands::{execute, run_dir, Cli, Command};

use imae_core::{ErrorKind, ImaeError};

pub fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Config => "config",
        ErrorKind::Data => "data",
        ErrorKind::Numeric => "numeric",
    }
}

pub fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

/// One machine-parseable line: `error[<kind>]: <reason>`.
pub fn error_line(kind: ErrorKind, reason: &str) -> String {
    let flat: Vec<&str> = reason.split_whitespace().collect();
    format!("error[{}]: {}", kind_name(kind), flat.join(" "))
}

pub fn report(e: &ImaeError) -> (String, u8) {
    (error_line(e.kind(), &e.to_string()), exit_code(e.kind()))
}
