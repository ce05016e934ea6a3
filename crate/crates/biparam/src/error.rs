use alloc::string::String;
use core::fmt;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Parameters violate a structural invariant (lengths, ranges, flags).
    Config(String),
    /// An argument does not satisfy an operation's precondition.
    Domain(String),
    /// A configuration is structurally valid but cannot support the
    /// requested computation (e.g. a goodness probability of zero).
    Infeasible(String),
    /// An exhaustive-mode computation would exceed the configured budget.
    BudgetExceeded(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(s) => write!(f, "configuration error: {s}"),
            Error::Domain(s) => write!(f, "domain error: {s}"),
            Error::Infeasible(s) => write!(f, "infeasible configuration: {s}"),
            Error::BudgetExceeded(s) => write!(f, "budget exceeded: {s}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
