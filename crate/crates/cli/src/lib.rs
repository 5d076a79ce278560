//! Support code for the `ibnorm` binary: run manifests, density-sweep
//! configuration and the property verification suite.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod manifest;
pub mod sweep;
pub mod verify;

use std::fmt;

/// Bad flags or configuration; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// One or more verified properties did not hold; exits with code 1.
#[derive(Debug)]
pub struct PropertyFailure(pub Vec<String>);

impl fmt::Display for PropertyFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "failed properties: {}", self.0.join(", "))
    }
}

impl std::error::Error for PropertyFailure {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Maps an error chain to the process exit code: configuration and usage
/// problems are 2, everything else is 1.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<ibnorm_harness::HarnessError>() {
            use ibnorm_harness::HarnessError as H;
            match e {
                H::Config(_) | H::ConfigParse { .. } => return EXIT_USAGE,
                H::Core(c) if is_core_usage(c) => return EXIT_USAGE,
                _ => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<ibnorm_core::Error>() {
            if is_core_usage(e) {
                return EXIT_USAGE;
            }
        }
    }
    EXIT_FAILURE
}

fn is_core_usage(e: &ibnorm_core::Error) -> bool {
    matches!(e, ibnorm_core::Error::Config(_) | ibnorm_core::Error::Contract(_))
}
