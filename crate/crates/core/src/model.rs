//! Domain types and planar geometry shared across the simulator.
//!
//! All coordinates live in a local tangent frame, in meters.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Sub};

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

/// Vehicle identifier, unique within a scenario.
pub type VehicleId = u32;

/// Discrete time step index; wall time is `step * t_s`.
pub type Step = u32;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position2D {
    pub x: f64,
    pub y: f64,
}

impl Position2D {
    pub const ORIGIN: Position2D = Position2D { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(&self, other: &Position2D) -> f64 {
        self.x * other.x + self.y * other.y
    }
}

impl Add for Position2D {
    type Output = Position2D;
    fn add(self, rhs: Position2D) -> Position2D {
        Position2D::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Position2D {
    type Output = Position2D;
    fn sub(self, rhs: Position2D) -> Position2D {
        Position2D::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Position2D {
    type Output = Position2D;
    fn mul(self, k: f64) -> Position2D {
        Position2D::new(self.x * k, self.y * k)
    }
}

impl fmt::Display for Position2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.3}, {:.3})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Velocity2D {
    pub vx: f64,
    pub vy: f64,
}

impl Velocity2D {
    pub const ZERO: Velocity2D = Velocity2D { vx: 0.0, vy: 0.0 };

    pub const fn new(vx: f64, vy: f64) -> Self {
        Self { vx, vy }
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    pub fn is_zero(&self) -> bool {
        self.vx == 0.0 && self.vy == 0.0
    }

    pub fn is_finite(&self) -> bool {
        self.vx.is_finite() && self.vy.is_finite()
    }

    /// Displacement covered in `dt` seconds.
    pub fn displacement(&self, dt: f64) -> Position2D {
        Position2D::new(self.vx * dt, self.vy * dt)
    }
}

/// Role a vehicle plays in the cooperative positioning network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeClass {
    Anchor,
    PseudoAnchor,
    Blind,
    /// Powered-off stationary vehicle that has not localised itself yet.
    Inactive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MotionKind {
    Moving,
    QueuedStationary,
    Parked,
}

impl MotionKind {
    pub fn is_stationary(self) -> bool {
        !matches!(self, MotionKind::Moving)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MotionKind::Moving => "moving",
            MotionKind::QueuedStationary => "queued",
            MotionKind::Parked => "parked",
        }
    }
}

impl std::str::FromStr for MotionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "moving" => Ok(MotionKind::Moving),
            "queued" => Ok(MotionKind::QueuedStationary),
            "parked" => Ok(MotionKind::Parked),
            other => Err(format!("unknown vehicle kind `{other}`")),
        }
    }
}

/// One trajectory sample. `kind` is per-sample so a moving vehicle can be
/// queued for part of its lifetime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub position: Position2D,
    pub velocity: Velocity2D,
    pub kind: MotionKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleRecord {
    pub id: VehicleId,
    /// Overall motion kind: `Parked` if parked throughout, `QueuedStationary`
    /// if never seen moving, `Moving` otherwise.
    pub kind: MotionKind,
    /// First step covered by `samples`; samples are consecutive from there.
    pub start: Step,
    pub samples: Vec<Sample>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrajectoryError {
    #[error("vehicle {id}: step {step} is inconsistent with its velocity (gap {gap:.3} m > {tolerance} m)")]
    Inconsistent {
        id: VehicleId,
        step: Step,
        gap: f64,
        tolerance: f64,
    },
    #[error("vehicle {id}: non-finite state at step {step}")]
    NonFinite { id: VehicleId, step: Step },
    #[error("vehicle {id}: parked sample with non-zero velocity at step {step}")]
    MovingParked { id: VehicleId, step: Step },
}

impl VehicleRecord {
    /// Builds a record, deriving the overall kind from the samples.
    pub fn new(id: VehicleId, start: Step, samples: Vec<Sample>) -> Self {
        let kind = overall_kind(&samples);
        Self {
            id,
            kind,
            start,
            samples,
        }
    }

    /// One past the last covered step.
    pub fn end(&self) -> Step {
        self.start + self.samples.len() as Step
    }

    pub fn is_active(&self, step: Step) -> bool {
        step >= self.start && step < self.end()
    }

    pub fn sample(&self, step: Step) -> Option<&Sample> {
        if step < self.start {
            return None;
        }
        self.samples.get((step - self.start) as usize)
    }

    /// Path length in meters.
    pub fn travelled_distance(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| distance(w[0].position, w[1].position))
            .sum()
    }

    /// Checks `|p(t+1) - p(t) - t_s v(t)| <= tolerance` along the trajectory.
    pub fn check_consistency(&self, t_s: f64, tolerance: f64) -> Result<(), TrajectoryError> {
        for (k, s) in self.samples.iter().enumerate() {
            let step = self.start + k as Step;
            if !s.position.is_finite() || !s.velocity.is_finite() {
                return Err(TrajectoryError::NonFinite { id: self.id, step });
            }
            if s.kind == MotionKind::Parked && !s.velocity.is_zero() {
                return Err(TrajectoryError::MovingParked { id: self.id, step });
            }
        }
        for (k, w) in self.samples.windows(2).enumerate() {
            let predicted = w[0].position + w[0].velocity.displacement(t_s);
            let gap = distance(predicted, w[1].position);
            if gap > tolerance {
                return Err(TrajectoryError::Inconsistent {
                    id: self.id,
                    step: self.start + k as Step,
                    gap,
                    tolerance,
                });
            }
        }
        Ok(())
    }
}

fn overall_kind(samples: &[Sample]) -> MotionKind {
    if samples.is_empty() {
        return MotionKind::Moving;
    }
    if samples.iter().all(|s| s.kind == MotionKind::Parked) {
        MotionKind::Parked
    } else if samples.iter().any(|s| s.kind == MotionKind::Moving) {
        MotionKind::Moving
    } else {
        MotionKind::QueuedStationary
    }
}

/// Per-vehicle state inside a [`WorldState`] snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub truth: Position2D,
    pub velocity: Velocity2D,
    pub class: NodeClass,
    /// Position the vehicle broadcasts to its neighbours.
    pub estimate: Position2D,
    pub covariance: Option<Matrix2<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WorldState {
    pub time: Step,
    pub vehicles: BTreeMap<VehicleId, VehicleState>,
}

impl WorldState {
    pub fn new(time: Step) -> Self {
        Self {
            time,
            vehicles: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: VehicleId) -> Option<&VehicleState> {
        self.vehicles.get(&id)
    }
}

/// Euclidean distance in meters.
pub fn distance(a: Position2D, b: Position2D) -> f64 {
    (a - b).norm()
}

/// Symmetric positive semidefinite check with absolute tolerance `tol` on
/// the smallest eigenvalue.
pub fn is_symmetric_psd(m: &Matrix2<f64>, tol: f64) -> bool {
    if !m.iter().all(|v| v.is_finite()) {
        return false;
    }
    let scale = m.abs().max().max(1.0);
    if (m[(0, 1)] - m[(1, 0)]).abs() > 1e-9 * scale {
        return false;
    }
    min_eigenvalue(m) >= -tol
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &Matrix2<f64>) -> f64 {
    let a = m[(0, 0)];
    let d = m[(1, 1)];
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let mean = 0.5 * (a + d);
    let radius = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    mean - radius
}
