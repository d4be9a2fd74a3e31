//! Crate-wide error type.

use crate::equilibrium::TomeResult;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A market, share vector, or ledger failed its construction invariants.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// An operation was called outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Matrix/vector dimensions do not line up, or a reduction precondition
    /// (common visibility, common feedback) fails.
    #[error("shape error: {0}")]
    Shape(String),

    /// Every item has zero trial-and-purchase probability at the given shares,
    /// so next-purchase probabilities are undefined. The caller must restrict
    /// the item set.
    #[error("zero purchase intensity at the given market share")]
    ZeroIntensity,

    /// A spending column hit zero for an item that is still visible to a type
    /// with positive feedback; the item can never recover and must be pruned.
    #[error("zero total spending on item {item}, which is visible to a type with positive feedback; prune the item")]
    ZeroColumn { item: usize },

    /// Fixed-point iteration stopped at max_iter with residual above tol.
    /// Carries the best iterate found so callers can inspect it.
    #[error("no convergence: residual {residual:.3e} > tol {tol:.3e} after {iterations} iterations")]
    NoConvergence {
        best: Box<TomeResult>,
        residual: f64,
        tol: f64,
        iterations: u64,
    },

    /// The stochastic engine drew more trials than the safety cap allows
    /// without reaching the requested number of purchases.
    #[error("trial cap exceeded: {trials} trials produced only {purchases} of {target} purchases")]
    TrialCap {
        trials: u64,
        purchases: u64,
        target: u64,
    },

    /// A data file failed to parse; location is 1-based.
    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// A parsed value is outside its allowed range; location is 1-based.
    #[error("value out of range in {path} at line {line}: {msg}")]
    Range {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
