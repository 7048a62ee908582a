//! Bayesian calibration of a colorectal-cancer natural-history model through a
//! neural-network metamodel.
//!
//! The crate is organised along the calibration workflow:
//!
//! * [`nathist`] simulates the natural-history model (cohort and microsimulation)
//!   and generates synthetic calibration targets.
//! * [`doe`] draws a Latin hypercube design over the prior box and evaluates the
//!   simulator at every design point.
//! * [`ann`] trains the feedforward metamodel and exposes analytic input gradients.
//! * [`calibrate`] samples the surrogate posterior with Hamiltonian Monte Carlo.
//! * [`imis`] calibrates the simulator directly with incremental mixture
//!   importance sampling, the baseline the surrogate is compared against.
//! * [`report`] and [`pipeline`] tie the stages together and write artifacts.

pub mod ann;
pub mod calibrate;
pub mod doe;
mod error;
pub mod imis;
pub mod nathist;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
