//! Tabular and linear tools for behavior-regularized offline reinforcement
//! learning: f-divergence regularizers, an exact regularized solver, in-sample
//! learners, datasets and the experiment drivers behind the `ivr` binary.

pub mod datasets;
pub mod error;
pub mod exact;
pub mod experiments;
pub mod extrema;
pub mod features;
pub mod learners;
pub mod mdp;
pub mod par;
pub mod regularizers;
pub mod rng;

pub use error::{Error, Result};
