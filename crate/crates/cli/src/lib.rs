//! Library backing the `vcsel-polar` command line tool: configuration
//! schema, subcommand implementations and output plumbing.

pub mod commands;
pub mod config;
pub mod output;

/// Map an error to the documented process exit code:
/// 1 config/schema, 2 below threshold, 3 instability, 4 numerical failure,
/// 5 I/O.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<vcsel_polar::Error>() {
            use vcsel_polar::Error::*;
            return match e {
                AnisotropyNotAligned(_) | InvalidParams(_) | InvalidInput(_)
                | MalformedFile(_) => 1,
                BelowThreshold { .. } => 2,
                UnstableSystem { .. } | UnstablePolarization { .. } => 3,
                StepTooLarge { .. } | StateDiverged { .. } | DefectiveMatrix(_)
                | SeriesTooShort(_) | FitDiverged { .. } | ModelMismatch { .. } => 4,
                Io(_) => 5,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 1;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 5;
        }
    }
    1
}
