//! Command-line driver: configuration files, the checkpoint/scene
//! container, and the experiment commands.
//!
//! Exit codes: 0 success, 2 usage, 3 data or configuration error,
//! 4 non-finite values.

pub mod archive;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod container;

use std::fmt;

pub use commands::{run, Cli};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(sop2::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Core(sop2::Error::Numerical(_)) => 4,
            Failure::Core(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<sop2::Error> for Failure {
    fn from(e: sop2::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}
