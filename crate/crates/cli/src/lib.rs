//! Pipelines behind the `delayprop` command.

pub mod config;
pub mod manifest;
pub mod stages;

use delayprop_core::error::Error;

/// Process exit status for each error category.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::MissingInput(_) => 3,
        Error::Io { .. } => 4,
        Error::MalformedRow { .. }
        | Error::UnknownColumn(_)
        | Error::MissingColumn(_)
        | Error::Csv(_)
        | Error::Json(_)
        | Error::Serde(_) => 5,
        Error::DataIntegrity(_) | Error::Graph(_) | Error::State(_) => 6,
        Error::Numeric { .. } => 7,
    }
}
