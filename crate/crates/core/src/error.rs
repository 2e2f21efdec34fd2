use alloc::boxed::Box;
use alloc::string::String;

use crate::isaacs::SolveDiagnostics;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's preconditions (dimension mismatch,
    /// out-of-box input).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(
        "value iteration did not converge in {} sweeps (final residual {:.3e})",
        .0.iterations,
        .0.final_residual
    )]
    NonConvergence(Box<SolveDiagnostics>),

    /// Training produced a non-finite loss or gradient.
    #[error("numerical abort at step {step}: {what}")]
    Numerical { step: u64, what: String },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::Error::Contract(alloc::format!($($arg)*))
    };
}

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::Error::Config(alloc::format!($($arg)*))
    };
}

pub(crate) use config_err;
pub(crate) use contract;
