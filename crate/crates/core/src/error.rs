use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the market model and the bidding games.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum MarketError {
    /// Total bid in a slot is zero, so the clearing price is undefined.
    #[error("degenerate market: total bid is zero{}", location(*slot, *iteration))]
    DegenerateMarket {
        slot: Option<usize>,
        iteration: Option<usize>,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// Load falls in a gap of the piecewise supply curve.
    #[error("no clearing price for load {load}: no segment is consistent (gap at breakpoint {breakpoint})")]
    NoClearingPrice { load: f64, breakpoint: f64 },

    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: String, reason: String },
}

impl MarketError {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        MarketError::InvalidField {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Attaches slot/iteration context to a degenerate-market error.
    pub fn at(self, slot: usize, iteration: Option<usize>) -> Self {
        match self {
            MarketError::DegenerateMarket { .. } => MarketError::DegenerateMarket {
                slot: Some(slot),
                iteration,
            },
            other => other,
        }
    }
}

fn location(slot: Option<usize>, iteration: Option<usize>) -> String {
    match (slot, iteration) {
        (Some(s), Some(g)) => format!(" (slot {s}, iteration {g})"),
        (Some(s), None) => format!(" (slot {s})"),
        (None, Some(g)) => format!(" (iteration {g})"),
        (None, None) => String::new(),
    }
}

/// Errors from the independent equilibrium oracle.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error(transparent)]
    Market(#[from] MarketError),

    /// Two-supplier markets have no interior supplier equilibrium.
    #[error("two-supplier market: symmetric stationarity factor (M-1)/(M-2) is singular; no interior equilibrium exists")]
    TwoSupplierDegenerate,

    #[error("no equilibrium: total supply stays below load {load} for every representable price")]
    NoEquilibrium { load: f64 },

    #[error("stationarity map of supplier {supplier} is not increasing on [0, L/2)")]
    NonMonotone { supplier: usize },
}

/// Errors reading or writing scenario and result files.
#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error at line {line}, column {column}, field `{field}`: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        field: String,
        message: String,
    },

    #[error("{path}: schema version {found} is not supported (expected {expected})")]
    Version {
        path: PathBuf,
        found: u64,
        expected: u32,
    },

    #[error("{path}: {source}")]
    Invalid {
        path: PathBuf,
        #[source]
        source: MarketError,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
}
