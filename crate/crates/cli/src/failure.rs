use std::fmt;

use gpda_core::Error;

/// A command failure carrying its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub const CHECK: u8 = 1;
pub const USAGE: u8 = 2;
pub const DATA: u8 = 3;

pub type CmdResult<T = ()> = Result<T, Failure>;

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }

    pub fn usage(msg: impl fmt::Display) -> Self {
        Self::new(USAGE, anyhow::anyhow!("{msg}"))
    }

    pub fn check(msg: impl fmt::Display) -> Self {
        Self::new(CHECK, anyhow::anyhow!("{msg}"))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) => USAGE,
            Error::Data(_) | Error::Checkpoint(_) | Error::Dimension { .. } | Error::LabelOutOfRange { .. } | Error::Empty(_) => DATA,
            Error::Diverged { .. } | Error::Diff(_) | Error::Io(_) => CHECK,
        };
        Self::new(code, e)
    }
}

impl From<gpda_core::DataError> for Failure {
    fn from(e: gpda_core::DataError) -> Self {
        Self::new(DATA, e)
    }
}

/// Output-side I/O problems.
pub fn io(path: &std::path::Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::new(CHECK, anyhow::Error::new(e).context(format!("writing {}", path.display())))
}

pub fn csv_io(path: &std::path::Path) -> impl Fn(csv::Error) -> Failure + '_ {
    move |e| Failure::new(CHECK, anyhow::Error::new(e).context(format!("writing {}", path.display())))
}
