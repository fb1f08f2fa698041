//! Neighbour discovery inside a communication disk and noisy range/GPS
//! measurements.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::{distance, NodeClass, Position2D, Step, VehicleId, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    /// Ranging noise standard deviation, meters.
    pub sigma_range: f64,
    /// Per-axis GPS noise standard deviation, meters.
    pub sigma_gps: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_range: 0.2,
            sigma_gps: 6.0,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.sigma_range >= 0.0 && self.sigma_gps >= 0.0 {
            Ok(())
        } else {
            Err(ChannelError::InvalidNoise)
        }
    }
}

/// Communication disk of a V2V device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommZone {
    pub radius: f64,
}

impl CommZone {
    pub fn new(radius: f64) -> Result<Self, ChannelError> {
        if radius > 0.0 && radius.is_finite() {
            Ok(Self { radius })
        } else {
            Err(ChannelError::InvalidRadius(radius))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeMeasurement {
    pub from_id: VehicleId,
    pub to_id: VehicleId,
    pub measured_distance: f64,
    pub timestep: Step,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsMeasurement {
    pub id: VehicleId,
    pub position: Position2D,
    pub timestep: Step,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ChannelError {
    #[error("vehicle {0} is not present in the world state")]
    UnknownVehicle(VehicleId),
    #[error("communication radius must be positive, got {0}")]
    InvalidRadius(f64),
    #[error("noise standard deviations must be non-negative")]
    InvalidNoise,
}

/// Ids within `zone` of vehicle `id` (by true position), excluding `id`
/// itself and inactive nodes, in ascending order.
pub fn neighbors(world: &WorldState, id: VehicleId, zone: CommZone) -> Result<Vec<VehicleId>, ChannelError> {
    let me = world.get(id).ok_or(ChannelError::UnknownVehicle(id))?;
    Ok(world
        .vehicles
        .iter()
        .filter(|(&other, state)| {
            other != id && state.class != NodeClass::Inactive && distance(me.truth, state.truth) <= zone.radius
        })
        .map(|(&other, _)| other)
        .collect())
}

/// Uniform-grid spatial index over the non-inactive vehicles of a snapshot.
/// Answers the same queries as [`neighbors`] without a full scan.
pub struct NeighborIndex<'w> {
    world: &'w WorldState,
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<VehicleId>>,
}

impl<'w> NeighborIndex<'w> {
    pub fn build(world: &'w WorldState, zone: CommZone) -> Self {
        let cell = zone.radius;
        let mut buckets: HashMap<(i64, i64), Vec<VehicleId>> = HashMap::new();
        for (&id, state) in &world.vehicles {
            if state.class == NodeClass::Inactive {
                continue;
            }
            buckets.entry(Self::key(cell, state.truth)).or_default().push(id);
        }
        Self { world, cell, buckets }
    }

    fn key(cell: f64, p: Position2D) -> (i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
    }

    pub fn query(&self, id: VehicleId) -> Result<Vec<VehicleId>, ChannelError> {
        let me = self.world.get(id).ok_or(ChannelError::UnknownVehicle(id))?;
        let (cx, cy) = Self::key(self.cell, me.truth);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(ids) = self.buckets.get(&(cx + dx, cy + dy)) else {
                    continue;
                };
                for &other in ids {
                    if other != id && distance(me.truth, self.world.vehicles[&other].truth) <= self.cell {
                        out.push(other);
                    }
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }
}

/// Noisy range `max(0, d + e)`, `e ~ N(0, sigma_range^2)`.
pub fn measure_range<R: Rng + ?Sized>(true_distance: f64, noise: &NoiseModel, rng: &mut R) -> f64 {
    let e: f64 = rng.sample(StandardNormal);
    (true_distance + noise.sigma_range * e).max(0.0)
}

/// GPS fix with independent per-axis Gaussian error.
pub fn measure_gps<R: Rng + ?Sized>(
    id: VehicleId,
    true_pos: Position2D,
    timestep: Step,
    noise: &NoiseModel,
    rng: &mut R,
) -> GpsMeasurement {
    let ex: f64 = rng.sample(StandardNormal);
    let ey: f64 = rng.sample(StandardNormal);
    GpsMeasurement {
        id,
        position: Position2D::new(true_pos.x + noise.sigma_gps * ex, true_pos.y + noise.sigma_gps * ey),
        timestep,
    }
}

/// Bernoulli link loss; `p = 0` never drops and consumes no randomness.
pub fn link_dropped<R: Rng + ?Sized>(drop_probability: f64, rng: &mut R) -> bool {
    drop_probability > 0.0 && rng.random::<f64>() < drop_probability
}
