//! Simulation library for multi-spiked tensor PCA recovery dynamics on the
//! Stiefel manifold: online SGD, gradient flow, and Langevin dynamics,
//! together with the deterministic population systems, recovery detectors,
//! comparison-inequality oracles, and a batch sweep harness.

pub mod analysis;
pub mod bounds;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod manifold;
pub mod model;
pub mod population;
pub mod rng;

pub use error::{Error, Result};
