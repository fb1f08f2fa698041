//! Cooperative position estimators.
//!
//! Two estimators share one problem description: a swarm optimiser
//! ([`gcpso`]) minimising a range-plus-motion cost, and an extended Kalman
//! filter ([`ekf`]) over the 2D position. The closed-form solvers in
//! [`geometry`] act as independent references for both.

pub mod ekf;
pub mod gcpso;
pub mod geometry;

pub use ekf::{ekf_predict, ekf_update, ekf_update_shared, EkfParams};
pub use gcpso::{gcpso_localize, GcpsoOutcome, GcpsoParams, RadiusChange, SearchRadius};
pub use geometry::{bilaterate_with_prior, gdop, trilaterate, Trilateration};

use crate::model::{distance, Position2D, Velocity2D};
use crate::policy::Candidate;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LocalizeError {
    #[error("covariance is not symmetric positive semidefinite")]
    NotPsd,
    #[error("anchor geometry is rank deficient (collinear anchors)")]
    RankDeficient,
    #[error("need at least {needed} anchors, got {got}")]
    TooFewAnchors { needed: usize, got: usize },
    #[error("{anchors} anchors but {ranges} ranges")]
    LengthMismatch { anchors: usize, ranges: usize },
    #[error("range circles are concentric")]
    Concentric,
    #[error("range circles miss each other by {gap:.3} m (tolerance {tolerance:.3} m)")]
    NoIntersection { gap: f64, tolerance: f64 },
}

/// Everything one vehicle knows when it localises itself at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationProblem {
    /// Neighbours chosen by the selection policy, best first.
    pub selected: Vec<Candidate>,
    /// Dead-reckoned position: previous estimate plus `t_s * velocity`.
    pub prior: Position2D,
    pub velocity: Velocity2D,
    pub t_s: f64,
}

impl LocalizationProblem {
    pub fn new(selected: Vec<Candidate>, prior: Position2D, velocity: Velocity2D, t_s: f64) -> Self {
        Self {
            selected,
            prior,
            velocity,
            t_s,
        }
    }
}

/// Squared range residuals over the selected neighbours plus the squared
/// distance to the motion prior.
pub fn cost(candidate: Position2D, prob: &LocalizationProblem) -> f64 {
    let ranges: f64 = prob
        .selected
        .iter()
        .map(|c| {
            let r = c.range.measured_distance - distance(candidate, c.shared_position);
            r * r
        })
        .sum();
    let p = candidate - prob.prior;
    ranges + p.dot(&p)
}
