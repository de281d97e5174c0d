use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Bad parameter value (out of domain or non-finite).
    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    /// Counts violating N ≥ n, M ≥ m, N − n ≥ M − m, M ≤ N, m ≤ n.
    #[error("infeasible counts: {0}")]
    Infeasible(String),

    #[error("empty dataset")]
    EmptyDataset,

    /// A statistic is undefined on this input (zero denominator, single-sex data, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Input file problems, with the 1-based row number when one applies.
    #[error("input error{}: {message}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    Input { row: Option<usize>, message: String },

    /// Non-finite likelihood, failed refinement, stuck chain.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, value: f64, reason: &'static str) -> Self {
        Error::InvalidParameter {
            name,
            value,
            reason,
        }
    }

    pub(crate) fn input(row: Option<usize>, message: impl Into<String>) -> Self {
        Error::Input {
            row,
            message: message.into(),
        }
    }

    /// True for errors caused by user input rather than numerics.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Numerical(_))
    }
}
