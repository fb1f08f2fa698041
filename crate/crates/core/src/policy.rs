//! Node priorities, best-neighbour selection and the anchor lifecycle.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::channel::RangeMeasurement;
use crate::model::{MotionKind, NodeClass, Position2D, VehicleId, Velocity2D};

/// How stationary vehicles take part in cooperative positioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Parked cars stay out of the network; everybody is a blind peer.
    Traditional,
    /// Stationary vehicles serve as prioritised anchors.
    Proposed,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Traditional => "traditional",
            Mode::Proposed => "proposed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Estimated error (m) below which a stationary vehicle becomes an anchor.
    pub anchor_accuracy_threshold: f64,
    /// Steps of GNSS averaging after which a stationary fix counts as precise.
    pub gnss_window: u32,
    /// Consecutive isolated steps before the estimate is replaced by GPS.
    pub gps_reset_interval: u32,
    pub mode: Mode,
    /// Parked cars are anchors from the first step.
    pub anchors_preloaded: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            anchor_accuracy_threshold: 1.0,
            gnss_window: 60,
            gps_reset_interval: 10,
            mode: Mode::Proposed,
            anchors_preloaded: true,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.anchor_accuracy_threshold > 0.0 && self.gnss_window > 0 && self.gps_reset_interval > 0 {
            Ok(())
        } else {
            Err(PolicyError::InvalidConfig)
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PolicyError {
    #[error("inactive nodes have no priority")]
    InactivePriority,
    #[error("vehicle is moving; stationary classification does not apply")]
    NotStationary,
    #[error("policy thresholds must be positive")]
    InvalidConfig,
}

/// A neighbour that could contribute a range to the target's update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub id: VehicleId,
    pub node_class: NodeClass,
    /// True position for anchors, the broadcast estimate otherwise.
    pub shared_position: Position2D,
    pub range: RangeMeasurement,
}

/// 1 for anchors, 2 for pseudo-anchors, 3 for blind nodes.
pub fn priority(class: NodeClass) -> Result<u8, PolicyError> {
    match class {
        NodeClass::Anchor => Ok(1),
        NodeClass::PseudoAnchor => Ok(2),
        NodeClass::Blind => Ok(3),
        NodeClass::Inactive => Err(PolicyError::InactivePriority),
    }
}

fn selection_order(a: &Candidate, b: &Candidate) -> Ordering {
    let pa = priority(a.node_class).unwrap_or(u8::MAX);
    let pb = priority(b.node_class).unwrap_or(u8::MAX);
    pa.cmp(&pb)
        .then_with(|| a.range.measured_distance.total_cmp(&b.range.measured_distance))
        .then_with(|| a.id.cmp(&b.id))
}

/// Highest priority first, then closest measured range, then lowest id.
/// Returns at most `k` candidates, sorted by that key. Inactive candidates
/// are never selected.
pub fn select_neighbors(candidates: &[Candidate], k: usize) -> Vec<Candidate> {
    let mut pool: Vec<Candidate> = candidates
        .iter()
        .filter(|c| c.node_class != NodeClass::Inactive)
        .copied()
        .collect();
    pool.sort_by(selection_order);
    pool.truncate(k);
    pool
}

/// Lifecycle of a stationary vehicle that is not yet an anchor.
///
/// `cp_error` is the estimated error of a cooperative fix obtained this step
/// from `anchors_in_range` anchors, if any. GNSS averaging qualifies once
/// `gnss_steps` reaches the configured window.
pub fn classify_stationary(
    kind: MotionKind,
    anchors_in_range: usize,
    gnss_steps: u32,
    cp_error: Option<f64>,
    cfg: &PolicyConfig,
) -> Result<NodeClass, PolicyError> {
    if kind == MotionKind::Moving {
        return Err(PolicyError::NotStationary);
    }
    let cooperative = anchors_in_range >= 2 && cp_error.is_some_and(|e| e <= cfg.anchor_accuracy_threshold);
    let gnss = gnss_steps >= cfg.gnss_window;
    Ok(if cooperative || gnss {
        NodeClass::Anchor
    } else if kind == MotionKind::Parked {
        NodeClass::Inactive
    } else {
        NodeClass::Blind
    })
}

/// Moving vehicles never become anchors; three anchors in the latest update
/// make them pseudo-anchors.
pub fn classify_moving(used_anchor_count: usize) -> NodeClass {
    if used_anchor_count >= 3 {
        NodeClass::PseudoAnchor
    } else {
        NodeClass::Blind
    }
}

pub fn dead_reckon(prev_estimate: Position2D, v: Velocity2D, t_s: f64) -> Position2D {
    prev_estimate + v.displacement(t_s)
}
