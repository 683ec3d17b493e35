//! Simulation, labeling and surrogate modeling of random quantum optics setups.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod exec;
pub mod labeler;
pub mod model;
pub mod optics;
pub mod rng;
pub mod srv_loss;
pub mod state;

pub use error::{Error, Result};
