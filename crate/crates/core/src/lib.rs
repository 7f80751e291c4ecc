//! Simulation and verification tools for local gradient methods whose
//! synchronization period grows as the learning rate decays.
//!
//! The crate is organised bottom-up: [`schedules`] produces learning rates,
//! [`syncrules`] turns a schedule into a sequence of communication rounds,
//! [`optim`] holds the per-replica update rules and [`engine`] runs parallel
//! and local training on synthetic problems. [`sdelab`] contains the
//! continuous-time numerics (projections onto minimizer manifolds, slow SDEs,
//! one-round moment estimates) and [`commcost`] the wall-clock cost model.

pub mod commcost;
pub mod engine;
mod error;
pub mod optim;
pub mod rng;
pub mod schedules;
pub mod sdelab;
pub mod syncrules;

pub use error::{Error, Result};
