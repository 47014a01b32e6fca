//! Few-step swarm steering under linear time-invariant dynamics: exact
//! finite-horizon minimum-energy controls, a learned interval-coefficient
//! field that amortizes them, and sampled-data rollout of either.

pub mod assignment;
pub mod ensemble;
pub mod error;
pub mod lti;
pub mod model;
pub mod propagate;
pub mod steering;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
