use std::fmt;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Data,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("incomplete grid: missing site ({i1}, {i2}) at t={t}")]
    IncompleteGrid { i1: usize, i2: usize, t: usize },

    #[error("irregular grid: {0}")]
    IrregularGrid(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("out of support: {}", fmt_cells(.0))]
    OutOfSupport(Vec<(usize, usize)>),

    #[error("out of support: x={0} lies outside the GEV support")]
    ValueOutOfSupport(f64),

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("optimizer did not converge after {iters} iterations (best value {best_value}, best point {best:?})")]
    NonConvergence {
        iters: usize,
        best: Vec<f64>,
        best_value: f64,
    },

    #[error("Cholesky factorization failed near sites {0} and {1}")]
    Cholesky(usize, usize),

    #[error("too many conditioning sites: {0} given, at most 6 supported")]
    TooManyConditioning(usize),

    #[error("degenerate pair: density undefined (h - u*tau = 0)")]
    DegeneratePair,

    #[error("non-finite log-likelihood term at site {site}, t={t}, lag {lag:?}")]
    NonFiniteTerm {
        site: usize,
        t: usize,
        lag: (i64, i64, usize),
    },

    #[error("parameter outside the admissible set: {0}")]
    OutsideParameterSpace(String),

    #[error("advected source off-domain: {0}")]
    OffDomain(String),

    #[error("quadrature did not converge (achieved tolerance {0:e})")]
    Quadrature(f64),

    #[error("too many failed bootstrap replicates: {failed} of {total}")]
    BootstrapFailures { failed: usize, total: usize },

    #[error("insufficient admissible events: requested {requested}, at most {feasible} available")]
    InsufficientEvents { requested: usize, feasible: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_cells(cells: &[(usize, usize)]) -> String {
    let shown: Vec<String> = cells
        .iter()
        .take(20)
        .map(|(s, t)| format!("(site {s}, t={t})"))
        .collect();
    let more = if cells.len() > 20 {
        format!(" and {} more", cells.len() - 20)
    } else {
        String::new()
    };
    format!("{} cell(s): {}{}", cells.len(), shown.join(", "), more)
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Invalid(_)
            | Error::TooManyConditioning(_)
            | Error::DegeneratePair
            | Error::OutsideParameterSpace(_)
            | Error::OffDomain(_) => ErrorKind::Validation,
            Error::NonConvergence { .. }
            | Error::Cholesky(..)
            | Error::NonFiniteTerm { .. }
            | Error::Quadrature(_)
            | Error::BootstrapFailures { .. } => ErrorKind::Numerical,
            Error::IncompleteGrid { .. }
            | Error::IrregularGrid(_)
            | Error::Parse(_)
            | Error::OutOfSupport(_)
            | Error::ValueOutOfSupport(_)
            | Error::Degenerate(_)
            | Error::InsufficientEvents { .. }
            | Error::Io(_) => ErrorKind::Data,
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorKind::Validation => "validation",
            ErrorKind::Numerical => "numerical",
            ErrorKind::Data => "data",
        };
        f.write_str(s)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
