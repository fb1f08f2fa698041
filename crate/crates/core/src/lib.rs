//! Cooperative vehicle positioning with parked and queued cars as anchors.

pub mod channel;
pub mod cli;
pub mod coverage;
pub mod harness;
pub mod localize;
pub mod model;
pub mod policy;
pub mod rng;
pub mod scenario;
