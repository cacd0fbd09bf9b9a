// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;

use circuitquant::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Io(String),
    Numeric(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Io(_) => EXIT_IO,
            Failure::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Io(m) => write!(f, "io error: {m}"),
            Failure::Numeric(m) => write!(f, "numerical error: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::UnsupportedBits(_)
            | Error::Empty(_)
            | Error::InvalidConfig(_)
            | Error::InvalidArgument(_)
            | Error::MaskedEdge(_)
            | Error::TokenOutOfRange { .. }
            | Error::Construction(_) => Failure::Config(m),
            Error::BadMagic(_)
            | Error::UnsupportedVersion(_)
            | Error::Truncated { .. }
            | Error::Checksum { .. }
            | Error::TrailingBytes(_)
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => Failure::Io(m),
            Error::Shape(_)
            | Error::NanLogits
            | Error::DegenerateDenominator(_)
            | Error::Scheduler(_)
            | Error::Deadlock(..) => Failure::Numeric(m),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;
