//! Command-line and HTTP front end for the `lerf-core` engine.

pub mod commands;
pub mod embedding;
pub mod server;
pub mod session;

use std::fmt;

/// A problem with the caller's input: missing files, unknown views, busy
/// ports. Exits with status 2.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

/// Process exit status for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<InputError>() {
            return 2;
        }
        if let Some(lerf_core::Error::Io { source, .. }) = cause.downcast_ref::<lerf_core::Error>() {
            if source.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
    }
    1
}
