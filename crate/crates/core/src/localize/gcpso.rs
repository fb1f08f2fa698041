//! Guaranteed Convergence Particle Swarm Optimiser over the 2D position.
//!
//! Ordinary particles follow the inertia-weighted PSO update. The particle
//! holding the global best instead samples uniformly in a box of half-width
//! `rho` around the global best, so the swarm keeps searching even after it
//! has collapsed onto a single point. `rho` doubles after a run of
//! `success_threshold` consecutive improvements of the global best and halves
//! after `failure_threshold` consecutive iterations without one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{cost, LocalizationProblem};
use crate::model::Position2D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcpsoParams {
    pub n_particles: usize,
    pub n_iterations: usize,
    /// Consecutive successes before the search radius doubles (s_c).
    pub success_threshold: u32,
    /// Consecutive failures before the search radius halves (f_c).
    pub failure_threshold: u32,
    /// Initial search radius, meters.
    pub rho0: f64,
    pub c1: f64,
    pub c2: f64,
    pub w_start: f64,
    pub w_end: f64,
    /// Stop as soon as the global best fitness is at or below this value.
    pub fitness_stop: f64,
}

impl Default for GcpsoParams {
    fn default() -> Self {
        Self {
            n_particles: 4,
            n_iterations: 20,
            success_threshold: 15,
            failure_threshold: 5,
            rho0: 1.0,
            c1: 2.0,
            c2: 2.0,
            w_start: 0.9,
            w_end: 0.2,
            fitness_stop: 0.0,
        }
    }
}

impl GcpsoParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_particles == 0 || self.n_iterations == 0 || self.success_threshold == 0 || self.failure_threshold == 0 {
            return Err("swarm counts must be at least 1".into());
        }
        if !(self.w_start >= self.w_end && self.w_end >= 0.0) {
            return Err("inertia must satisfy w_start >= w_end >= 0".into());
        }
        if !(self.rho0 > 0.0) {
            return Err("rho0 must be positive".into());
        }
        Ok(())
    }

    /// Inertia weight at iteration `k`, falling linearly from `w_start` to `w_end`.
    pub fn inertia(&self, k: usize) -> f64 {
        if self.n_iterations <= 1 {
            return self.w_start;
        }
        self.w_start - (self.w_start - self.w_end) * k as f64 / (self.n_iterations - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadiusChange {
    Doubled,
    Halved,
}

/// Success/failure bookkeeping for the global-best particle's search box.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchRadius {
    rho: f64,
    successes: u32,
    failures: u32,
    success_threshold: u32,
    failure_threshold: u32,
}

impl SearchRadius {
    pub fn new(params: &GcpsoParams) -> Self {
        Self {
            rho: params.rho0,
            successes: 0,
            failures: 0,
            success_threshold: params.success_threshold,
            failure_threshold: params.failure_threshold,
        }
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Records whether the last iteration improved the global best.
    pub fn record(&mut self, improved: bool) -> Option<RadiusChange> {
        if improved {
            self.successes += 1;
            self.failures = 0;
            if self.successes >= self.success_threshold {
                self.successes = 0;
                self.rho *= 2.0;
                return Some(RadiusChange::Doubled);
            }
        } else {
            self.failures += 1;
            self.successes = 0;
            if self.failures >= self.failure_threshold {
                self.failures = 0;
                self.rho *= 0.5;
                return Some(RadiusChange::Halved);
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcpsoOutcome {
    pub estimate: Position2D,
    pub fitness: f64,
    /// Global-best fitness after initialisation and after every iteration.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Particle {
    position: Position2D,
    velocity: Position2D,
    best: Position2D,
    best_fitness: f64,
}

fn best_index(swarm: &[Particle]) -> usize {
    let mut best = 0;
    for (i, p) in swarm.iter().enumerate().skip(1) {
        if p.best_fitness < swarm[best].best_fitness {
            best = i;
        }
    }
    best
}

/// Minimises [`cost`] with GCPSO. Half of the swarm starts on the
/// highest-priority neighbour, the rest on the prior, all at rest.
pub fn gcpso_localize<R: Rng + ?Sized>(prob: &LocalizationProblem, params: &GcpsoParams, rng: &mut R) -> GcpsoOutcome {
    let n = params.n_particles.max(1);
    let seed_point = prob.selected.first().map_or(prob.prior, |c| c.shared_position);
    let mut swarm: Vec<Particle> = (0..n)
        .map(|i| {
            let position = if i < n / 2 { seed_point } else { prob.prior };
            let f = cost(position, prob);
            Particle {
                position,
                velocity: Position2D::ORIGIN,
                best: position,
                best_fitness: f,
            }
        })
        .collect();

    let mut g = best_index(&swarm);
    let mut history = Vec::with_capacity(params.n_iterations + 1);
    history.push(swarm[g].best_fitness);
    let mut radius = SearchRadius::new(params);

    for k in 0..params.n_iterations {
        if swarm[g].best_fitness <= params.fitness_stop {
            break;
        }
        let w = params.inertia(k);
        let global = swarm[g].best;
        let rho = radius.rho();
        for (i, p) in swarm.iter_mut().enumerate() {
            let (vx, vy) = if i == g {
                let jx = rho * (1.0 - 2.0 * rng.random::<f64>());
                let jy = rho * (1.0 - 2.0 * rng.random::<f64>());
                (
                    global.x - p.position.x + w * p.velocity.x + jx,
                    global.y - p.position.y + w * p.velocity.y + jy,
                )
            } else {
                let (r1x, r1y, r2x, r2y): (f64, f64, f64, f64) = (rng.random(), rng.random(), rng.random(), rng.random());
                (
                    w * p.velocity.x + params.c1 * r1x * (p.best.x - p.position.x) + params.c2 * r2x * (global.x - p.position.x),
                    w * p.velocity.y + params.c1 * r1y * (p.best.y - p.position.y) + params.c2 * r2y * (global.y - p.position.y),
                )
            };
            p.velocity = Position2D::new(vx, vy);
            p.position = p.position + p.velocity;
            let f = cost(p.position, prob);
            if f < p.best_fitness {
                p.best = p.position;
                p.best_fitness = f;
            }
        }
        let previous = swarm[g].best_fitness;
        g = best_index(&swarm);
        let improved = swarm[g].best_fitness < previous;
        radius.record(improved);
        history.push(swarm[g].best_fitness);
    }

    GcpsoOutcome {
        estimate: swarm[g].best,
        fitness: swarm[g].best_fitness,
        history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localize::geometry::trilaterate;
    use crate::localize::tests::anchor;
    use crate::model::{distance, Velocity2D};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn problem(truth: Position2D, anchors: &[Position2D], prior: Position2D) -> LocalizationProblem {
        let selected = anchors
            .iter()
            .enumerate()
            .map(|(i, &a)| anchor(i as u32 + 1, a, distance(truth, a)))
            .collect();
        LocalizationProblem::new(selected, prior, Velocity2D::ZERO, 1.0)
    }

    #[test]
    fn standard_parameters_are_defaults() {
        let p = GcpsoParams::default();
        assert_eq!((p.n_particles, p.n_iterations), (4, 20));
        assert_eq!((p.success_threshold, p.failure_threshold), (15, 5));
        assert_eq!((p.rho0, p.c1, p.c2), (1.0, 2.0, 2.0));
        assert_eq!((p.w_start, p.w_end, p.fitness_stop), (0.9, 0.2, 0.0));
        assert!((p.inertia(0) - 0.9).abs() < 1e-15);
        assert!((p.inertia(19) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn three_anchor_fix() {
        let truth = Position2D::new(10.0, 10.0);
        let anchors = [Position2D::new(0.0, 0.0), Position2D::new(40.0, 0.0), Position2D::new(0.0, 30.0)];
        let ranges: Vec<f64> = anchors.iter().map(|&a| distance(truth, a)).collect();
        let oracle = trilaterate(&anchors, &ranges).unwrap().position;
        assert!(distance(oracle, truth) < 1e-9);
        let out = gcpso_localize(&problem(truth, &anchors, truth), &GcpsoParams::default(), &mut ChaCha8Rng::seed_from_u64(1));
        assert!(distance(out.estimate, oracle) < 0.5);
        assert_eq!(out.fitness, 0.0);
        assert_eq!(out.history.len(), 1, "fitness_stop triggers at the exact solution");
    }

    #[test]
    fn no_neighbours_returns_prior() {
        let prior = Position2D::new(3.0, -4.0);
        let prob = LocalizationProblem::new(vec![], prior, Velocity2D::ZERO, 1.0);
        let out = gcpso_localize(&prob, &GcpsoParams::default(), &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(out.estimate, prior);
        assert_eq!(out.fitness, 0.0);
    }

    #[test]
    fn global_best_never_worsens() {
        let truth = Position2D::new(10.0, 10.0);
        let anchors = [Position2D::new(0.0, 0.0), Position2D::new(14.0, 3.0)];
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prior = truth + Position2D::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0));
            let out = gcpso_localize(&problem(truth, &anchors, prior), &GcpsoParams::default(), &mut rng);
            assert!(out.history.windows(2).all(|w| w[1] <= w[0]));
            assert_eq!(*out.history.last().unwrap(), out.fitness);
        }
    }

    #[test]
    fn radius_doubles_after_successes_and_halves_after_failures() {
        let params = GcpsoParams::default();
        let mut r = SearchRadius::new(&params);
        for _ in 0..14 {
            assert_eq!(r.record(true), None);
        }
        assert_eq!(r.rho(), 1.0);
        assert_eq!(r.record(true), Some(RadiusChange::Doubled));
        assert_eq!(r.rho(), 2.0);

        for _ in 0..4 {
            assert_eq!(r.record(false), None);
        }
        assert_eq!(r.record(false), Some(RadiusChange::Halved));
        assert_eq!(r.rho(), 1.0);

        // an interruption resets the streak
        for _ in 0..4 {
            r.record(false);
        }
        r.record(true);
        for _ in 0..4 {
            assert_eq!(r.record(false), None);
        }
        assert_eq!(r.rho(), 1.0);
    }

    #[test]
    fn translation_equivariance_with_fixed_seed() {
        let truth = Position2D::new(10.0, 10.0);
        let anchors = [Position2D::new(0.0, 0.0), Position2D::new(40.0, 0.0), Position2D::new(0.0, 30.0)];
        let prior = truth + Position2D::new(0.2, -0.1);
        let shift = Position2D::new(250.0, -75.0);
        let moved: Vec<Position2D> = anchors.iter().map(|&a| a + shift).collect();
        let a = gcpso_localize(&problem(truth, &anchors, prior), &GcpsoParams::default(), &mut ChaCha8Rng::seed_from_u64(5));
        let b = gcpso_localize(
            &problem(truth + shift, &moved, prior + shift),
            &GcpsoParams::default(),
            &mut ChaCha8Rng::seed_from_u64(5),
        );
        assert!(distance(a.estimate + shift, b.estimate) < 1e-6);
    }
}
