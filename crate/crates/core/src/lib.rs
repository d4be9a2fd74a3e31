//! Trial-offer market dynamics: heterogeneous multinomial-logit choice,
//! equilibrium computation and verification, mirror-descent identities,
//! stochastic simulation with purchase-clock bookkeeping, and the
//! ranking-strategy experiment pipeline.

pub mod cli;
pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod experiments;
pub mod fileio;
pub mod market;
pub mod objectives;
pub mod rng;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
