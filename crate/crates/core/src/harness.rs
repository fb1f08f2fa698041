//! Episodes, paired ensembles and the error statistics reported on them.
//!
//! An episode replays a trace step by step. Every vehicle that is not an
//! anchor dead-reckons, ranges to the neighbours it can hear, keeps the best
//! three and runs the configured estimator. Ensembles run the same seeds in
//! both modes so that the per-run comparison sees identical noise.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::Write;

use nalgebra::Matrix2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelError, CommZone, NeighborIndex, NoiseModel, RangeMeasurement};
use crate::localize::{
    bilaterate_with_prior, ekf_predict, ekf_update_shared, gcpso_localize, gdop, trilaterate, EkfParams, GcpsoParams,
    LocalizationProblem, LocalizeError,
};
use crate::model::{distance, MotionKind, NodeClass, Position2D, Step, VehicleId, VehicleRecord, VehicleState, Velocity2D, WorldState};
use crate::policy::{self, classify_moving, classify_stationary, select_neighbors, Candidate, Mode, PolicyConfig, PolicyError};
use crate::rng::{self, substream, Purpose};
use crate::scenario::{ScenarioConfig, TRACE_TOLERANCE};

/// Neighbours used per localisation.
pub const MAX_SELECTED: usize = 3;
/// Smallest ranging deviation the filter is told about.
const MIN_FILTER_SIGMA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Gcpso,
    Ekf,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Gcpso => "gcpso",
            Algorithm::Ekf => "ekf",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("error series is empty")]
    EmptySeries,
    #[error("baseline RMSE is zero; improvement is undefined")]
    ZeroBaseline,
    #[error(transparent)]
    Localize(#[from] LocalizeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub zone: CommZone,
    pub noise: NoiseModel,
    pub algorithm: Algorithm,
    pub policy: PolicyConfig,
    pub gcpso: GcpsoParams,
    pub ekf: EkfParams,
    pub n_runs: u32,
    pub seed: u64,
    /// Both modes of a run share one seed.
    pub paired_seeds: bool,
    pub drop_probability: f64,
    /// Vehicles reported by the ensemble, longest routes first; 0 keeps all.
    pub tracked: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            zone: CommZone { radius: 15.0 },
            noise: NoiseModel::default(),
            algorithm: Algorithm::Gcpso,
            policy: PolicyConfig::default(),
            gcpso: GcpsoParams::default(),
            ekf: EkfParams::default(),
            n_runs: 40,
            seed: 1,
            paired_seeds: true,
            drop_probability: 0.0,
            tracked: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = |m: String| HarnessError::Config(m);
        if self.n_runs < 1 {
            return Err(cfg("n_runs must be at least 1".into()));
        }
        if !(self.zone.radius > 0.0 && self.zone.radius.is_finite()) {
            return Err(cfg(format!("zone radius must be positive, got {}", self.zone.radius)));
        }
        self.noise.validate().map_err(|e| cfg(e.to_string()))?;
        self.policy.validate().map_err(|e| cfg(e.to_string()))?;
        self.gcpso.validate().map_err(cfg)?;
        if !(self.ekf.sigma_q >= 0.0 && self.ekf.sigma_gamma >= 0.0) {
            return Err(cfg("EKF deviations must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.drop_probability) {
            return Err(cfg("drop_probability must lie in [0, 1)".into()));
        }
        if !(self.scenario.t_s > 0.0) {
            return Err(cfg("t_s must be positive".into()));
        }
        Ok(())
    }

    /// Filter parameters tied to the simulated channel and sampling time.
    pub fn filter_params(&self) -> EkfParams {
        EkfParams {
            sigma_r: self.noise.sigma_range.max(MIN_FILTER_SIGMA),
            t_s: self.scenario.t_s,
            ..self.ekf
        }
    }
}

/// Outcome for one non-parked vehicle over one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleOutcome {
    pub id: VehicleId,
    /// Steps at which an error was recorded (the vehicle was moving).
    pub steps: Vec<Step>,
    pub errors: Vec<f64>,
    /// Anchors among the selected neighbours, per recorded step.
    pub anchors_used: Vec<u8>,
    /// Distinct parked cars that were ever within the communication zone.
    pub parked_encountered: usize,
    pub travelled_km: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub run_seed: u64,
    pub mode: Mode,
    pub vehicles: Vec<VehicleOutcome>,
}

impl EpisodeResult {
    pub fn vehicle(&self, id: VehicleId) -> Option<&VehicleOutcome> {
        self.vehicles.iter().find(|v| v.id == id)
    }
}

#[derive(Debug, Clone)]
struct Agent {
    estimate: Position2D,
    cov: Matrix2<f64>,
    class: NodeClass,
    initialized: bool,
    isolated: u32,
    gnss_sum: Position2D,
    gnss_steps: u32,
    /// Stationary and localised well enough to serve as an anchor.
    fixed: bool,
}

impl Agent {
    fn new() -> Self {
        Self {
            estimate: Position2D::ORIGIN,
            cov: Matrix2::zeros(),
            class: NodeClass::Blind,
            initialized: false,
            isolated: 0,
            gnss_sum: Position2D::ORIGIN,
            gnss_steps: 0,
            fixed: false,
        }
    }

    fn reset_gnss(&mut self) {
        self.gnss_sum = Position2D::ORIGIN;
        self.gnss_steps = 0;
    }
}

/// Static parked positions bucketed for range queries.
struct ParkedGrid {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<(usize, Position2D)>>,
}

impl ParkedGrid {
    fn new(parked: &[Position2D], radius: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<(usize, Position2D)>> = HashMap::new();
        for (i, &p) in parked.iter().enumerate() {
            buckets.entry(Self::key(radius, p)).or_default().push((i, p));
        }
        Self { cell: radius, buckets }
    }

    fn key(cell: f64, p: Position2D) -> (i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
    }

    fn visit(&self, at: Position2D, mut f: impl FnMut(usize)) {
        let (cx, cy) = Self::key(self.cell, at);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for &(i, p) in self.buckets.get(&(cx + dx, cy + dy)).into_iter().flatten() {
                    if distance(at, p) <= self.cell {
                        f(i);
                    }
                }
            }
        }
    }
}

fn first_and_last_step(trace: &[VehicleRecord]) -> Option<(Step, Step)> {
    let first = trace.iter().map(|r| r.start).min()?;
    let last = trace.iter().filter(|r| !r.samples.is_empty()).map(|r| r.end()).max()?;
    Some((first, last))
}

/// Checks that every trajectory matches the configured sampling time.
pub fn check_trace(trace: &[VehicleRecord], t_s: f64) -> Result<(), HarnessError> {
    for r in trace {
        r.check_consistency(t_s, TRACE_TOLERANCE)
            .map_err(|e| HarnessError::Config(format!("trace does not match t_s = {t_s}: {e}")))?;
    }
    Ok(())
}

struct Episode<'a> {
    cfg: &'a RunConfig,
    filter: EkfParams,
    seed: u64,
    mode: Mode,
}

impl Episode<'_> {
    fn gps(&self, id: VehicleId, truth: Position2D, t: Step) -> Position2D {
        let mut r = substream(self.seed, Purpose::Gps, id, None, t);
        channel::measure_gps(id, truth, t, &self.cfg.noise, &mut r).position
    }

    /// Ranges to every audible neighbour, paired with what they broadcast.
    fn candidates(&self, world: &WorldState, index: &NeighborIndex, id: VehicleId, t: Step) -> Result<Vec<Candidate>, HarnessError> {
        let me = world.vehicles[&id].truth;
        let mut out = Vec::new();
        for j in index.query(id)? {
            if self.cfg.drop_probability > 0.0 {
                let mut r = substream(self.seed, Purpose::LinkDrop, id, Some(j), t);
                if channel::link_dropped(self.cfg.drop_probability, &mut r) {
                    continue;
                }
            }
            let other = &world.vehicles[&j];
            let mut r = substream(self.seed, Purpose::Range, id, Some(j), t);
            out.push(Candidate {
                id: j,
                node_class: other.class,
                shared_position: other.estimate,
                range: RangeMeasurement {
                    from_id: id,
                    to_id: j,
                    measured_distance: channel::measure_range(distance(me, other.truth), &self.cfg.noise, &mut r),
                    timestep: t,
                },
            });
        }
        Ok(out)
    }

    /// One cooperative update of a blind or pseudo-anchor vehicle. Returns
    /// the number of anchors used.
    fn cooperate(&self, world: &WorldState, agent: &mut Agent, id: VehicleId, truth: Position2D, prev_v: Velocity2D, cands: &[Candidate], t: Step) -> Result<usize, HarnessError> {
        let t_s = self.cfg.scenario.t_s;
        let selected = select_neighbors(cands, MAX_SELECTED);
        let prior = policy::dead_reckon(agent.estimate, prev_v, t_s);
        let anchors = selected.iter().filter(|c| c.node_class == NodeClass::Anchor).count();

        if selected.is_empty() {
            agent.isolated += 1;
            match self.cfg.algorithm {
                Algorithm::Gcpso => agent.estimate = prior,
                Algorithm::Ekf => (agent.estimate, agent.cov) = ekf_predict(agent.estimate, &agent.cov, prev_v, &self.filter)?,
            }
            if agent.isolated >= self.cfg.policy.gps_reset_interval {
                agent.estimate = self.gps(id, truth, t);
                agent.cov = self.gps_covariance();
                agent.isolated = 0;
            }
        } else {
            agent.isolated = 0;
            match self.cfg.algorithm {
                Algorithm::Gcpso => {
                    let prob = LocalizationProblem::new(selected, prior, prev_v, t_s);
                    let mut r = substream(self.seed, Purpose::Gcpso, id, None, t);
                    agent.estimate = gcpso_localize(&prob, &self.cfg.gcpso, &mut r).estimate;
                }
                Algorithm::Ekf => {
                    let (x, p) = ekf_predict(agent.estimate, &agent.cov, prev_v, &self.filter)?;
                    let shared: Vec<Matrix2<f64>> = selected
                        .iter()
                        .map(|c| world.vehicles[&c.id].covariance.unwrap_or_else(Matrix2::zeros))
                        .collect();
                    (agent.estimate, agent.cov) = ekf_update_shared(x, &p, &selected, &shared, &self.filter)?;
                }
            }
        }
        agent.class = classify_moving(anchors);
        Ok(anchors)
    }

    fn gps_covariance(&self) -> Matrix2<f64> {
        Matrix2::identity() * self.cfg.noise.sigma_gps.powi(2)
    }

    /// Anchor lifecycle of a stationary vehicle: accumulate GNSS and try a
    /// fix from the anchors in range.
    fn settle(&self, agent: &mut Agent, id: VehicleId, kind: MotionKind, truth: Position2D, cands: &[Candidate], t: Step) -> Result<(), HarnessError> {
        agent.gnss_sum = agent.gnss_sum + self.gps(id, truth, t);
        agent.gnss_steps += 1;
        let gnss_avg = agent.gnss_sum * (1.0 / agent.gnss_steps as f64);

        let anchors: Vec<Candidate> = cands.iter().filter(|c| c.node_class == NodeClass::Anchor).copied().collect();
        let best = select_neighbors(&anchors, MAX_SELECTED);
        let positions: Vec<Position2D> = best.iter().map(|c| c.shared_position).collect();
        let ranges: Vec<f64> = best.iter().map(|c| c.range.measured_distance).collect();
        let reference = if agent.initialized { agent.estimate } else { gnss_avg };
        let fix = match best.len() {
            3 => trilaterate(&positions, &ranges).ok().map(|f| f.position),
            2 => {
                let tolerance = 3.0 * self.cfg.noise.sigma_range + 0.1;
                bilaterate_with_prior(positions[0], ranges[0], positions[1], ranges[1], reference, tolerance).ok()
            }
            _ => None,
        };
        let fix = fix.and_then(|p| gdop(&positions, p).map(|g| (p, self.cfg.noise.sigma_range * g)));

        let class = classify_stationary(kind, anchors.len(), agent.gnss_steps, fix.map(|(_, e)| e), &self.cfg.policy)?;
        if class == NodeClass::Anchor {
            let cooperative = fix.filter(|(_, e)| anchors.len() >= 2 && *e <= self.cfg.policy.anchor_accuracy_threshold);
            agent.estimate = cooperative.map_or(gnss_avg, |(p, _)| p);
            agent.fixed = true;
            agent.initialized = true;
            agent.class = NodeClass::Anchor;
        } else if kind == MotionKind::Parked {
            agent.class = class;
        }
        Ok(())
    }
}

/// Replays `trace` once in `mode`. The result is a pure function of the
/// arguments.
pub fn run_episode(cfg: &RunConfig, trace: &[VehicleRecord], mode: Mode, run_seed: u64) -> Result<EpisodeResult, HarnessError> {
    cfg.validate()?;
    check_trace(trace, cfg.scenario.t_s)?;
    let ep = Episode {
        cfg,
        filter: cfg.filter_params(),
        seed: run_seed,
        mode,
    };
    let proposed = ep.mode == Mode::Proposed;
    let preloaded = proposed && cfg.policy.anchors_preloaded;

    let parked_idx: Vec<usize> = (0..trace.len()).filter(|&i| trace[i].kind == MotionKind::Parked).collect();
    let parked_pos: Vec<Position2D> = parked_idx
        .iter()
        .map(|&i| trace[i].samples.first().map_or(Position2D::ORIGIN, |s| s.position))
        .collect();
    let parked_grid = ParkedGrid::new(&parked_pos, cfg.zone.radius);

    let mut agents: Vec<Agent> = vec![Agent::new(); trace.len()];
    let mut outcomes: Vec<VehicleOutcome> = trace
        .iter()
        .map(|r| VehicleOutcome {
            id: r.id,
            steps: Vec::new(),
            errors: Vec::new(),
            anchors_used: Vec::new(),
            parked_encountered: 0,
            travelled_km: r.travelled_distance() / 1000.0,
        })
        .collect();
    let mut seen: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); trace.len()];

    let Some((first, last)) = first_and_last_step(trace) else {
        return Ok(EpisodeResult {
            run_seed,
            mode,
            vehicles: Vec::new(),
        });
    };

    for t in first..=last {
        // What every participant broadcasts at this step, from last step's state.
        let mut world = WorldState::new(t);
        let mut active: Vec<usize> = Vec::new();
        for (i, r) in trace.iter().enumerate() {
            let Some(s) = r.sample(t) else { continue };
            active.push(i);
            let a = &mut agents[i];
            let prev_v = if t > r.start { r.sample(t - 1).map_or(Velocity2D::ZERO, |p| p.velocity) } else { Velocity2D::ZERO };
            let mut shared_cov = None;
            let (class, shared) = if r.kind == MotionKind::Parked {
                if !proposed {
                    continue;
                }
                if preloaded {
                    (NodeClass::Anchor, s.position)
                } else if a.fixed {
                    (NodeClass::Anchor, a.estimate)
                } else {
                    (NodeClass::Inactive, a.estimate)
                }
            } else {
                if !a.initialized {
                    continue;
                }
                if s.kind == MotionKind::Moving {
                    if a.fixed {
                        a.fixed = false;
                        a.class = NodeClass::Blind;
                    }
                    a.reset_gnss();
                }
                if a.fixed {
                    (NodeClass::Anchor, a.estimate)
                } else {
                    if cfg.algorithm == Algorithm::Ekf {
                        shared_cov = Some(a.cov + Matrix2::identity() * ep.filter.process_variance());
                    }
                    (a.class, policy::dead_reckon(a.estimate, prev_v, cfg.scenario.t_s))
                }
            };
            world.vehicles.insert(
                r.id,
                VehicleState {
                    truth: s.position,
                    velocity: s.velocity,
                    class,
                    estimate: shared,
                    covariance: shared_cov,
                },
            );
        }
        let index = NeighborIndex::build(&world, cfg.zone);

        let mut next: Vec<(usize, Agent, Option<usize>)> = Vec::with_capacity(active.len());
        for &i in &active {
            let r = &trace[i];
            let s = r.sample(t).expect("active");
            let mut a = agents[i].clone();
            let mut used = None;
            let stationary = s.kind.is_stationary();

            if r.kind == MotionKind::Parked {
                if proposed && !preloaded && !a.fixed {
                    let cands = ep.candidates(&world, &index, r.id, t)?;
                    ep.settle(&mut a, r.id, s.kind, s.position, &cands, t)?;
                }
            } else if !a.initialized {
                a.estimate = ep.gps(r.id, s.position, t);
                a.cov = ep.gps_covariance();
                a.initialized = true;
                a.class = NodeClass::Blind;
                used = Some(0);
                if proposed && stationary {
                    a.gnss_sum = a.estimate;
                    a.gnss_steps = 1;
                }
            } else if !(proposed && a.fixed) {
                let prev_v = if t > r.start { r.sample(t - 1).map_or(Velocity2D::ZERO, |p| p.velocity) } else { Velocity2D::ZERO };
                let cands = ep.candidates(&world, &index, r.id, t)?;
                used = Some(ep.cooperate(&world, &mut a, r.id, s.position, prev_v, &cands, t)?);
                if proposed && stationary {
                    let coop_class = a.class;
                    ep.settle(&mut a, r.id, s.kind, s.position, &cands, t)?;
                    if !a.fixed {
                        a.class = coop_class;
                    }
                }
            }
            next.push((i, a, used));
        }

        for (i, a, used) in next {
            let r = &trace[i];
            let s = r.sample(t).expect("active");
            if r.kind != MotionKind::Parked {
                parked_grid.visit(s.position, |k| {
                    seen[i].insert(k);
                });
                if s.kind == MotionKind::Moving && a.initialized {
                    let o = &mut outcomes[i];
                    o.steps.push(t);
                    o.errors.push(distance(a.estimate, s.position));
                    o.anchors_used.push(used.unwrap_or(0).min(u8::MAX as usize) as u8);
                }
            }
            agents[i] = a;
        }
    }

    let vehicles = outcomes
        .into_iter()
        .enumerate()
        .filter(|(i, _)| trace[*i].kind != MotionKind::Parked)
        .map(|(i, mut o)| {
            o.parked_encountered = seen[i].len();
            o
        })
        .collect();
    Ok(EpisodeResult { run_seed, mode, vehicles })
}

pub fn rmse(errors: &[f64]) -> Result<f64, HarnessError> {
    if errors.is_empty() {
        return Err(HarnessError::EmptySeries);
    }
    Ok((errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

/// Relative improvement in percent of `prop_rmse` over `trad_rmse`.
pub fn improvement(trad_rmse: f64, prop_rmse: f64) -> Result<f64, HarnessError> {
    if !(trad_rmse > 0.0) {
        return Err(HarnessError::ZeroBaseline);
    }
    Ok(100.0 * (trad_rmse - prop_rmse) / trad_rmse)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either side is constant or the lengths differ.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// The `n` vehicles with the longest routes, ties broken by id; all
/// non-parked vehicles when `n` is zero.
pub fn tracked_vehicles(trace: &[VehicleRecord], n: usize) -> Vec<VehicleId> {
    let mut movers: Vec<(f64, VehicleId)> = trace
        .iter()
        .filter(|r| r.kind != MotionKind::Parked)
        .map(|r| (r.travelled_distance(), r.id))
        .collect();
    movers.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    if n > 0 {
        movers.truncate(n);
    }
    let mut ids: Vec<VehicleId> = movers.into_iter().map(|(_, id)| id).collect();
    ids.sort_unstable();
    ids
}

/// Aggregated results of one vehicle in one mode over an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRow {
    pub vehicle: VehicleId,
    pub mode: Mode,
    pub algorithm: Algorithm,
    pub sigma_r: f64,
    pub zone: f64,
    pub run_rmse: Vec<f64>,
    /// Per-run improvement over the traditional run with the same index.
    pub run_improvement: Vec<f64>,
    pub parked_experienced: usize,
    pub travelled_km: f64,
}

impl EnsembleRow {
    pub fn n_runs(&self) -> usize {
        self.run_rmse.len()
    }

    pub fn mean_rmse(&self) -> f64 {
        mean(&self.run_rmse)
    }

    pub fn std_rmse(&self) -> f64 {
        std_dev(&self.run_rmse)
    }

    pub fn improvement(&self) -> Option<f64> {
        (!self.run_improvement.is_empty()).then(|| mean(&self.run_improvement))
    }

    pub fn positive_runs(&self) -> usize {
        self.run_improvement.iter().filter(|&&x| x > 0.0).count()
    }

    pub fn parked_per_km(&self) -> f64 {
        if self.travelled_km > 0.0 {
            self.parked_experienced as f64 / self.travelled_km
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    pub rows: Vec<EnsembleRow>,
    /// Episodes in (run, mode) order, restricted to the tracked vehicles.
    pub episodes: Vec<EpisodeResult>,
}

fn seed_for(cfg: &RunConfig, run: u32, mode: Mode) -> u64 {
    let s = rng::run_seed(cfg.seed, run);
    if cfg.paired_seeds || mode == Mode::Traditional {
        s
    } else {
        rng::mix(&[s, Purpose::Unpaired as u64])
    }
}

/// Runs `cfg.n_runs` episodes per mode. Episodes execute on the current
/// rayon pool; results are collected in run order.
pub fn ensemble(cfg: &RunConfig, trace: &[VehicleRecord], modes: &[Mode]) -> Result<EnsembleOutput, HarnessError> {
    cfg.validate()?;
    check_trace(trace, cfg.scenario.t_s)?;
    let tracked = tracked_vehicles(trace, cfg.tracked);
    let jobs: Vec<(u32, Mode)> = (0..cfg.n_runs).flat_map(|k| modes.iter().map(move |&m| (k, m))).collect();
    let mut episodes = jobs
        .par_iter()
        .map(|&(k, m)| run_episode(cfg, trace, m, seed_for(cfg, k, m)))
        .collect::<Result<Vec<_>, _>>()?;
    for e in &mut episodes {
        e.vehicles.retain(|v| tracked.binary_search(&v.id).is_ok());
    }

    let mut rows = Vec::new();
    for &id in &tracked {
        let per_mode = |m: Mode| -> Vec<&VehicleOutcome> {
            episodes.iter().filter(|e| e.mode == m).filter_map(|e| e.vehicle(id)).collect()
        };
        let trad: Vec<f64> = per_mode(Mode::Traditional).iter().filter_map(|o| rmse(&o.errors).ok()).collect();
        for &m in modes {
            let outs = per_mode(m);
            let Some(first) = outs.first() else { continue };
            if outs.iter().any(|o| o.errors.is_empty()) {
                continue;
            }
            let run_rmse: Vec<f64> = outs.iter().map(|o| rmse(&o.errors)).collect::<Result<_, _>>()?;
            let run_improvement = if m == Mode::Proposed && trad.len() == run_rmse.len() {
                trad.iter()
                    .zip(&run_rmse)
                    .filter_map(|(&a, &b)| improvement(a, b).ok())
                    .collect()
            } else {
                Vec::new()
            };
            rows.push(EnsembleRow {
                vehicle: id,
                mode: m,
                algorithm: cfg.algorithm,
                sigma_r: cfg.noise.sigma_range,
                zone: cfg.zone.radius,
                run_rmse,
                run_improvement,
                parked_experienced: first.parked_encountered,
                travelled_km: first.travelled_km,
            });
        }
    }
    Ok(EnsembleOutput { rows, episodes })
}

/// Grid of ensemble cells swept by `sim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub algorithms: Vec<Algorithm>,
    pub modes: Vec<Mode>,
    pub sigma_r: Vec<f64>,
    pub zones: Vec<f64>,
}

pub fn run_sweep(base: &RunConfig, sweep: &Sweep, trace: &[VehicleRecord]) -> Result<Vec<EnsembleOutput>, HarnessError> {
    let mut out = Vec::new();
    for &algorithm in &sweep.algorithms {
        for &sigma_r in &sweep.sigma_r {
            for &zone in &sweep.zones {
                let cfg = RunConfig {
                    algorithm,
                    noise: NoiseModel {
                        sigma_range: sigma_r,
                        ..base.noise
                    },
                    zone: CommZone::new(zone).map_err(|e| HarnessError::Config(e.to_string()))?,
                    ..base.clone()
                };
                out.push(ensemble(&cfg, trace, &sweep.modes)?);
            }
        }
    }
    Ok(out)
}

pub const RESULTS_HEADER: [&str; 13] = [
    "vehicle",
    "mode",
    "algorithm",
    "sigma_r",
    "zone",
    "n_runs",
    "mean_rmse",
    "std_rmse",
    "improvement",
    "positive_runs",
    "parked_experienced",
    "travelled_km",
    "parked_per_km",
];

pub fn write_results<W: Write>(out: W, rows: &[EnsembleRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        let (imp, pos) = match r.improvement() {
            Some(x) => (format!("{x:.4}"), r.positive_runs().to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([
            r.vehicle.to_string(),
            r.mode.as_str().to_string(),
            r.algorithm.as_str().to_string(),
            r.sigma_r.to_string(),
            r.zone.to_string(),
            r.n_runs().to_string(),
            format!("{:.6}", r.mean_rmse()),
            format!("{:.6}", r.std_rmse()),
            imp,
            pos,
            r.parked_experienced.to_string(),
            format!("{:.6}", r.travelled_km),
            format!("{:.4}", r.parked_per_km()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-step errors of the tracked vehicles, one row per recorded step.
pub fn write_step_dump<W: Write>(out: W, cells: &[EnsembleOutput], algorithms: &[(Algorithm, f64, f64)]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["algorithm", "sigma_r", "zone", "run_seed", "mode", "vehicle", "t", "error", "anchors_used"])?;
    for (cell, (alg, sigma_r, zone)) in cells.iter().zip(algorithms) {
        for e in &cell.episodes {
            for v in &e.vehicles {
                for ((t, err), used) in v.steps.iter().zip(&v.errors).zip(&v.anchors_used) {
                    w.write_record([
                        alg.as_str().to_string(),
                        sigma_r.to_string(),
                        zone.to_string(),
                        e.run_seed.to_string(),
                        e.mode.as_str().to_string(),
                        v.id.to_string(),
                        t.to_string(),
                        format!("{err:.6}"),
                        used.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Plain-text table: one line per (algorithm, sigma_r, zone, vehicle) with
/// both modes side by side.
pub fn format_summary(rows: &[EnsembleRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<6} {:>7} {:>6} {:>7} {:>18} {:>18} {:>12}",
        "alg", "sigma_r", "zone", "vehicle", "traditional", "proposed", "improvement"
    );
    let cell = |r: Option<&EnsembleRow>| r.map_or("-".to_string(), |r| format!("{:.2} ({:.2})", r.mean_rmse(), r.std_rmse()));
    let mut seen = BTreeSet::new();
    for r in rows {
        let key = (r.algorithm.as_str(), r.sigma_r.to_bits(), r.zone.to_bits(), r.vehicle);
        if !seen.insert(key) {
            continue;
        }
        let find = |m: Mode| {
            rows.iter().find(|x| {
                x.mode == m && x.algorithm == r.algorithm && x.sigma_r == r.sigma_r && x.zone == r.zone && x.vehicle == r.vehicle
            })
        };
        let prop = find(Mode::Proposed);
        let imp = prop.and_then(EnsembleRow::improvement).map_or("-".to_string(), |x| format!("{x:.2}%"));
        let _ = writeln!(
            s,
            "{:<6} {:>7} {:>6} {:>7} {:>18} {:>18} {:>12}",
            r.algorithm.as_str(),
            r.sigma_r,
            r.zone,
            r.vehicle,
            cell(find(Mode::Traditional)),
            cell(prop),
            imp
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate, ScenarioKind};
    use proptest::prelude::*;

    fn circuit(n_parked: u32, duration: u32) -> (RunConfig, Vec<VehicleRecord>) {
        let mut cfg = RunConfig::default();
        cfg.scenario.n_parked = n_parked;
        cfg.scenario.duration = duration;
        let trace = generate(ScenarioKind::Circuit, &cfg.scenario).unwrap();
        (cfg, trace)
    }

    #[test]
    fn rmse_examples() {
        assert!((rmse(&[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(rmse(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[5.0]).unwrap(), 5.0);
        assert!(matches!(rmse(&[]), Err(HarnessError::EmptySeries)));
    }

    #[test]
    fn improvement_examples() {
        assert_eq!(improvement(10.0, 5.0).unwrap(), 50.0);
        assert_eq!(improvement(7.3, 7.3).unwrap(), 0.0);
        assert!(matches!(improvement(0.0, 1.0), Err(HarnessError::ZeroBaseline)));
    }

    /// Averaging per-run ratios differs from the ratio of averages.
    #[test]
    fn improvement_is_a_mean_of_ratios() {
        let trad = [10.0, 6.0];
        let prop = [9.0, 4.0];
        let per_run: Vec<f64> = trad.iter().zip(&prop).map(|(&a, &b)| improvement(a, b).unwrap()).collect();
        let averaged = mean(&per_run);
        let pooled = improvement(mean(&trad), mean(&prop)).unwrap();
        assert!((averaged - 21.6666666).abs() < 1e-6);
        assert!((pooled - 18.75).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rmse_is_permutation_invariant(mut xs in prop::collection::vec(0.0..100.0f64, 1..30), rot in 0usize..30) {
            let a = rmse(&xs).unwrap();
            let k = rot % xs.len();
            xs.rotate_left(k);
            xs.reverse();
            prop_assert!((a - rmse(&xs).unwrap()).abs() <= 1e-12 * (1.0 + a));
        }

        #[test]
        fn improvement_sign(a in 0.01..100.0f64, b in 0.0..100.0f64) {
            let i = improvement(a, b).unwrap();
            prop_assert_eq!(improvement(a, a).unwrap(), 0.0);
            prop_assert_eq!(i > 0.0, a > b);
            prop_assert_eq!(i < 0.0, a < b);
        }
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_none());
    }

    #[test]
    fn noiseless_anchors_pin_the_estimate() {
        let (mut cfg, trace) = circuit(20, 120);
        cfg.noise = NoiseModel { sigma_range: 0.0, sigma_gps: 0.0 };
        cfg.zone = CommZone { radius: 1000.0 };
        for alg in [Algorithm::Gcpso, Algorithm::Ekf] {
            cfg.algorithm = alg;
            let res = run_episode(&cfg, &trace, Mode::Proposed, 3).unwrap();
            let v = res.vehicle(0).unwrap();
            assert_eq!(v.errors.len(), 120);
            assert!(v.anchors_used[1..].iter().all(|&n| n == 3));
            let worst = v.errors[1..].iter().cloned().fold(0.0, f64::max);
            assert!(worst <= 0.5, "{alg:?}: {worst}");
        }
    }

    #[test]
    fn noiseless_ranges_correct_a_gps_start() {
        let (mut cfg, trace) = circuit(20, 120);
        cfg.noise = NoiseModel { sigma_range: 0.0, sigma_gps: 6.0 };
        cfg.zone = CommZone { radius: 1000.0 };
        for alg in [Algorithm::Gcpso, Algorithm::Ekf] {
            cfg.algorithm = alg;
            let v = run_episode(&cfg, &trace, Mode::Proposed, 4).unwrap().vehicle(0).unwrap().clone();
            let tail = v.errors[30..].iter().cloned().fold(0.0, f64::max);
            assert!(tail <= 0.5, "{alg:?}: {tail}");
        }
    }

    #[test]
    fn isolated_vehicle_stays_within_gps_envelope() {
        let (mut cfg, trace) = circuit(0, 1000);
        cfg.policy.mode = Mode::Traditional;
        for alg in [Algorithm::Gcpso, Algorithm::Ekf] {
            cfg.algorithm = alg;
            let v = run_episode(&cfg, &trace, Mode::Traditional, 9).unwrap().vehicle(0).unwrap().clone();
            assert_eq!(v.errors.len(), 1000);
            // exact dead reckoning between resets: the error only changes at a fix
            let changes = v.errors.windows(2).filter(|w| (w[1] - w[0]).abs() > 1e-9).count();
            assert!(changes <= 100);
            assert!(v.errors.iter().all(|&e| e < 5.0 * 6.0));
            let r = rmse(&v.errors).unwrap();
            assert!((r - 6.0 * 2f64.sqrt()).abs() < 2.0, "rmse {r}");
        }
    }

    #[test]
    fn episodes_are_deterministic() {
        let (cfg, trace) = circuit(20, 100);
        let a = run_episode(&cfg, &trace, Mode::Proposed, 11).unwrap();
        let b = run_episode(&cfg, &trace, Mode::Proposed, 11).unwrap();
        assert_eq!(a, b);
        let c = run_episode(&cfg, &trace, Mode::Proposed, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn parked_cars_are_counted_once() {
        let (cfg, trace) = circuit(20, 200);
        let res = run_episode(&cfg, &trace, Mode::Traditional, 1).unwrap();
        let v = res.vehicle(0).unwrap();
        assert!(v.parked_encountered > 0 && v.parked_encountered <= 20);
        assert!((v.travelled_km - trace[0].travelled_distance() / 1000.0).abs() < 1e-12 && v.travelled_km > 1.5);
    }

    #[test]
    fn single_run_ensemble_equals_the_run() {
        let (mut cfg, trace) = circuit(20, 120);
        cfg.n_runs = 1;
        let out = ensemble(&cfg, &trace, &[Mode::Traditional, Mode::Proposed]).unwrap();
        assert_eq!(out.rows.len(), 2);
        let seed = rng::run_seed(cfg.seed, 0);
        for row in &out.rows {
            let ep = run_episode(&cfg, &trace, row.mode, seed).unwrap();
            assert_eq!(row.mean_rmse(), rmse(&ep.vehicle(0).unwrap().errors).unwrap());
            assert_eq!(row.std_rmse(), 0.0);
        }
    }

    #[test]
    fn without_parked_cars_the_modes_agree() {
        let (mut cfg, trace) = circuit(0, 120);
        cfg.n_runs = 3;
        let out = ensemble(&cfg, &trace, &[Mode::Traditional, Mode::Proposed]).unwrap();
        let prop = out.rows.iter().find(|r| r.mode == Mode::Proposed).unwrap();
        assert!(prop.improvement().unwrap().abs() < 1e-9);
    }

    #[test]
    fn trace_with_other_sampling_time_is_rejected() {
        let (mut cfg, trace) = circuit(3, 50);
        cfg.scenario.t_s = 2.0;
        assert!(matches!(run_episode(&cfg, &trace, Mode::Proposed, 1), Err(HarnessError::Config(_))));
    }

    #[test]
    fn tracked_selection() {
        let (_, trace) = circuit(5, 30);
        assert_eq!(tracked_vehicles(&trace, 1), vec![0]);
        assert_eq!(tracked_vehicles(&trace, 0), vec![0]);
    }

    #[test]
    fn results_csv_rows() {
        let (mut cfg, trace) = circuit(20, 60);
        cfg.n_runs = 2;
        let out = ensemble(&cfg, &trace, &[Mode::Traditional, Mode::Proposed]).unwrap();
        let mut buf = Vec::new();
        write_results(&mut buf, &out.rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with(&RESULTS_HEADER.join(",")));
        assert!(format_summary(&out.rows).lines().count() == 2);
    }
}
