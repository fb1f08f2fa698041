//! Mobility traces: CSV ingestion and the two synthetic scenario generators.
//!
//! The trace format is a plain CSV with header `t,id,x,y,vx,vy,kind`, rows
//! sorted by `(t, id)`. Lines starting with `#` are comments.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{distance, MotionKind, Position2D, Sample, Step, Velocity2D, VehicleId, VehicleRecord};
use crate::rng::scenario_rng;

pub const TRACE_HEADER: [&str; 7] = ["t", "id", "x", "y", "vx", "vy", "kind"];

/// Tolerance used when validating ingested traces against their velocities.
pub const TRACE_TOLERANCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Circuit,
    Town,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Number of simulated steps.
    pub duration: u32,
    /// Sampling time in seconds.
    pub t_s: f64,
    pub area: Rect,
    pub n_moving: u32,
    pub n_parked: u32,
    pub n_entering: u32,
    /// Steps between consecutive entering vehicles.
    pub entry_interval: u32,
    /// Along-road gap between neighbouring parked cars, meters.
    pub parked_spacing: f64,
    /// Closed polyline driven in the circuit scenario.
    pub circuit: Vec<Position2D>,
    /// Cruise speed of moving vehicles, m/s.
    pub speed: f64,
    /// Lateral distance of parked cars from the road centreline, meters.
    pub parked_offset: [f64; 2],
    /// Street grid pitch of the town scenario, meters.
    pub block_size: f64,
    /// Intersections where traffic halts until the next signal cycle.
    pub n_choke_points: u32,
    pub queue_cycle: u32,
}

impl ScenarioConfig {
    /// 200 m x 100 m loop with a row of parked cars along the first street.
    pub fn circuit_default() -> Self {
        Self {
            seed: 1,
            duration: 600,
            t_s: 1.0,
            area: Rect {
                min_x: -20.0,
                min_y: -20.0,
                max_x: 220.0,
                max_y: 120.0,
            },
            n_moving: 1,
            n_parked: 20,
            n_entering: 0,
            entry_interval: 4,
            parked_spacing: 10.0,
            circuit: vec![
                Position2D::new(0.0, 0.0),
                Position2D::new(200.0, 0.0),
                Position2D::new(200.0, 100.0),
                Position2D::new(0.0, 100.0),
            ],
            speed: 10.0,
            parked_offset: [2.5, 8.0],
            block_size: 100.0,
            n_choke_points: 0,
            queue_cycle: 30,
        }
    }

    /// Grid town with random routes, entering traffic and signalised choke points.
    pub fn town_default() -> Self {
        Self {
            seed: 1,
            duration: 900,
            t_s: 1.0,
            area: Rect {
                min_x: 0.0,
                min_y: 0.0,
                max_x: 1600.0,
                max_y: 1000.0,
            },
            n_moving: 200,
            n_parked: 605,
            n_entering: 95,
            entry_interval: 4,
            parked_spacing: 6.0,
            circuit: Vec::new(),
            speed: 10.0,
            parked_offset: [2.5, 6.0],
            block_size: 100.0,
            n_choke_points: 12,
            queue_cycle: 30,
        }
    }

    pub fn defaults_for(kind: ScenarioKind) -> Self {
        match kind {
            ScenarioKind::Circuit => Self::circuit_default(),
            ScenarioKind::Town => Self::town_default(),
        }
    }

    fn validate_common(&self) -> Result<(), ScenarioError> {
        if self.duration == 0 {
            return Err(ScenarioError::Config("duration must be at least one step".into()));
        }
        if !(self.t_s > 0.0 && self.t_s.is_finite()) {
            return Err(ScenarioError::Config(format!("t_s must be positive, got {}", self.t_s)));
        }
        if !(self.parked_spacing > 0.0) {
            return Err(ScenarioError::Config("parked_spacing must be positive".into()));
        }
        if !(self.speed >= 0.0 && self.speed.is_finite()) {
            return Err(ScenarioError::Config("speed must be non-negative".into()));
        }
        let [lo, hi] = self.parked_offset;
        if !(lo >= 0.0 && hi >= lo && hi <= 15.0) {
            return Err(ScenarioError::Config(
                "parked_offset must satisfy 0 <= min <= max <= 15".into(),
            ));
        }
        Ok(())
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::circuit_default()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: {message}")]
    Validation { line: u64, message: String },
    #[error("invalid scenario config: {0}")]
    Config(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads a trace CSV into one record per vehicle, ordered by id.
pub fn parse_trace<R: Read>(input: R) -> Result<Vec<VehicleRecord>, ScenarioError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input);

    let header = reader.headers()?.clone();
    let header_line = header.position().map_or(1, |p| p.line());
    if header.iter().ne(TRACE_HEADER.iter().copied()) {
        return Err(ScenarioError::Parse {
            line: header_line,
            message: format!("expected header `{}`", TRACE_HEADER.join(",")),
        });
    }

    let mut tracks: BTreeMap<VehicleId, (Step, Vec<Sample>)> = BTreeMap::new();
    let mut last_key: Option<(Step, VehicleId)> = None;
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != TRACE_HEADER.len() {
            return Err(ScenarioError::Parse {
                line,
                message: format!("expected {} fields, found {}", TRACE_HEADER.len(), row.len()),
            });
        }
        let parse_err = |field: &str, value: &str| ScenarioError::Parse {
            line,
            message: format!("invalid {field} `{value}`"),
        };
        let t: Step = row[0].parse().map_err(|_| parse_err("t", &row[0]))?;
        let id: VehicleId = row[1].parse().map_err(|_| parse_err("id", &row[1]))?;
        let mut nums = [0.0f64; 4];
        for (k, name) in ["x", "y", "vx", "vy"].iter().enumerate() {
            let v: f64 = row[k + 2].parse().map_err(|_| parse_err(name, &row[k + 2]))?;
            if !v.is_finite() {
                return Err(parse_err(name, &row[k + 2]));
            }
            nums[k] = v;
        }
        let kind: MotionKind = row[6].parse().map_err(|m: String| ScenarioError::Parse { line, message: m })?;

        if kind == MotionKind::Parked && (nums[2] != 0.0 || nums[3] != 0.0) {
            return Err(ScenarioError::Validation {
                line,
                message: format!("parked vehicle {id} has non-zero velocity"),
            });
        }
        if let Some(prev) = last_key {
            if (t, id) == prev {
                return Err(ScenarioError::Validation {
                    line,
                    message: format!("duplicate row for t={t}, id={id}"),
                });
            }
            if (t, id) < prev {
                return Err(ScenarioError::Validation {
                    line,
                    message: "rows must be sorted by (t, id)".into(),
                });
            }
        }
        last_key = Some((t, id));

        let sample = Sample {
            position: Position2D::new(nums[0], nums[1]),
            velocity: Velocity2D::new(nums[2], nums[3]),
            kind,
        };
        let entry = tracks.entry(id).or_insert_with(|| (t, Vec::new()));
        let expected = entry.0 + entry.1.len() as Step;
        if t != expected {
            return Err(ScenarioError::Validation {
                line,
                message: format!("vehicle {id} has a gap: expected t={expected}, found t={t}"),
            });
        }
        entry.1.push(sample);
    }

    Ok(tracks
        .into_iter()
        .map(|(id, (start, samples))| VehicleRecord::new(id, start, samples))
        .collect())
}

/// Writes records as a trace CSV sorted by `(t, id)`.
pub fn write_trace<W: Write>(out: W, records: &[VehicleRecord]) -> Result<(), ScenarioError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(TRACE_HEADER)?;

    let mut order: Vec<&VehicleRecord> = records.iter().collect();
    order.sort_by_key(|r| r.id);
    let end = order.iter().map(|r| r.end()).max().unwrap_or(0);
    let start = order.iter().map(|r| r.start).min().unwrap_or(0);
    for t in start..end {
        for rec in &order {
            if let Some(s) = rec.sample(t) {
                writer.write_record([
                    t.to_string(),
                    rec.id.to_string(),
                    s.position.x.to_string(),
                    s.position.y.to_string(),
                    s.velocity.vx.to_string(),
                    s.velocity.vy.to_string(),
                    s.kind.as_str().to_string(),
                ])?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

/// Convenience wrapper seeding the generator from `cfg.seed`.
pub fn generate(kind: ScenarioKind, cfg: &ScenarioConfig) -> Result<Vec<VehicleRecord>, ScenarioError> {
    let mut rng = scenario_rng(cfg.seed);
    match kind {
        ScenarioKind::Circuit => gen_circuit(cfg, &mut rng),
        ScenarioKind::Town => gen_town(cfg, &mut rng),
    }
}

/// Closed polyline with arc-length parameterisation.
#[derive(Debug, Clone)]
pub struct Loop {
    points: Vec<Position2D>,
    cumulative: Vec<f64>,
}

impl Loop {
    pub fn new(waypoints: &[Position2D]) -> Result<Self, ScenarioError> {
        if waypoints.len() < 2 {
            return Err(ScenarioError::Config("circuit needs at least two waypoints".into()));
        }
        let mut points = waypoints.to_vec();
        if points.first() != points.last() {
            points.push(points[0]);
        }
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let last = *cumulative.last().unwrap();
            cumulative.push(last + distance(w[0], w[1]));
        }
        if !(cumulative.last().copied().unwrap_or(0.0) > 0.0) {
            return Err(ScenarioError::Config("circuit has zero length".into()));
        }
        Ok(Self { points, cumulative })
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    fn segment(&self, s: f64) -> (usize, f64) {
        let s = s.rem_euclid(self.length());
        let idx = match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i - 1,
        };
        // skip zero-length segments
        let mut i = idx;
        while i + 1 < self.points.len() - 1 && self.cumulative[i + 1] - self.cumulative[i] == 0.0 {
            i += 1;
        }
        (i, s - self.cumulative[i])
    }

    pub fn point_at(&self, s: f64) -> Position2D {
        let (i, along) = self.segment(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let len = distance(a, b);
        if len == 0.0 {
            return a;
        }
        a + (b - a) * (along / len)
    }

    /// Unit normal (left of travel direction) of the segment containing `s`.
    pub fn normal_at(&self, s: f64) -> Position2D {
        let (i, _) = self.segment(s);
        let d = self.points[i + 1] - self.points[i];
        let n = d.norm();
        Position2D::new(-d.y / n, d.x / n)
    }
}

/// Appends one integration step toward `target`, returning the new position.
/// Velocity is chosen so that `p + t_s * v` reproduces the stored next position
/// bit for bit.
fn step_toward(samples: &mut Vec<Sample>, p: Position2D, target: Position2D, t_s: f64, kind: MotionKind) -> Position2D {
    let v = Velocity2D::new((target.x - p.x) / t_s, (target.y - p.y) / t_s);
    let v = if kind == MotionKind::Moving { v } else { Velocity2D::ZERO };
    samples.push(Sample {
        position: p,
        velocity: v,
        kind,
    });
    p + v.displacement(t_s)
}

/// Small-scale scenario: moving vehicles lapping a closed circuit plus a row
/// of parked cars next to it. Vehicle 0 is the tracked target.
pub fn gen_circuit<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<Vec<VehicleRecord>, ScenarioError> {
    cfg.validate_common()?;
    let circuit = Loop::new(&cfg.circuit)?;
    let length = circuit.length();
    if cfg.n_parked > 0 {
        if cfg.parked_spacing > length {
            return Err(ScenarioError::Config(format!(
                "parked_spacing {} exceeds circuit length {length:.1}",
                cfg.parked_spacing
            )));
        }
        if cfg.n_parked as f64 * cfg.parked_spacing > length + 1e-9 {
            return Err(ScenarioError::Config(format!(
                "{} parked cars at {} m spacing do not fit on a {length:.1} m circuit",
                cfg.n_parked, cfg.parked_spacing
            )));
        }
    }

    let mut records = Vec::new();
    let stride = cfg.speed * cfg.t_s;
    for k in 0..cfg.n_moving {
        let s0 = length * k as f64 / cfg.n_moving as f64;
        let mut p = circuit.point_at(s0);
        let mut samples = Vec::with_capacity(cfg.duration as usize);
        for t in 0..cfg.duration {
            let target = circuit.point_at(s0 + stride * (t + 1) as f64);
            p = step_toward(&mut samples, p, target, cfg.t_s, MotionKind::Moving);
        }
        records.push(VehicleRecord::new(k, 0, samples));
    }

    let [lo, hi] = cfg.parked_offset;
    for k in 0..cfg.n_parked {
        let s = k as f64 * cfg.parked_spacing;
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let offset = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let pos = circuit.point_at(s) + circuit.normal_at(s) * (side * offset);
        records.push(parked_record(cfg.n_moving + k, pos, cfg.duration));
    }
    Ok(records)
}

fn parked_record(id: VehicleId, pos: Position2D, duration: u32) -> VehicleRecord {
    let sample = Sample {
        position: pos,
        velocity: Velocity2D::ZERO,
        kind: MotionKind::Parked,
    };
    VehicleRecord::new(id, 0, vec![sample; duration as usize])
}

/// Rectangular street grid of the town scenario.
struct Grid {
    origin: Position2D,
    block: f64,
    nx: i64,
    ny: i64,
}

impl Grid {
    fn node(&self, i: i64, j: i64) -> Position2D {
        self.origin + Position2D::new(i as f64 * self.block, j as f64 * self.block)
    }

    fn random_node<R: Rng + ?Sized>(&self, rng: &mut R) -> (i64, i64) {
        (rng.random_range(0..=self.nx), rng.random_range(0..=self.ny))
    }

    /// Manhattan route between two nodes, excluding the start node.
    fn route<R: Rng + ?Sized>(&self, from: (i64, i64), to: (i64, i64), rng: &mut R) -> Vec<(i64, i64)> {
        let mut path = Vec::new();
        let (mut i, mut j) = from;
        let x_first = rng.random::<bool>();
        let walk_x = |i: &mut i64, j: i64, path: &mut Vec<(i64, i64)>| {
            while *i != to.0 {
                *i += (to.0 - *i).signum();
                path.push((*i, j));
            }
        };
        let walk_y = |i: i64, j: &mut i64, path: &mut Vec<(i64, i64)>| {
            while *j != to.1 {
                *j += (to.1 - *j).signum();
                path.push((i, *j));
            }
        };
        if x_first {
            walk_x(&mut i, j, &mut path);
            walk_y(i, &mut j, &mut path);
        } else {
            walk_y(i, &mut j, &mut path);
            walk_x(&mut i, j, &mut path);
        }
        path
    }

    fn neighbours(&self, (i, j): (i64, i64)) -> Vec<(i64, i64)> {
        [(1, 0), (-1, 0), (0, 1), (0, -1)]
            .iter()
            .map(|(di, dj)| (i + di, j + dj))
            .filter(|&(a, b)| a >= 0 && b >= 0 && a <= self.nx && b <= self.ny)
            .collect()
    }
}

/// Drives one vehicle along grid routes, halting at choke points.
struct Driver<'a> {
    grid: &'a Grid,
    chokes: &'a BTreeSet<(i64, i64)>,
    cfg: &'a ScenarioConfig,
    position: Position2D,
    node: (i64, i64),
    path: VecDeque<(i64, i64)>,
    halted_until: Option<Step>,
    roaming: bool,
}

impl Driver<'_> {
    /// Produces samples from `start` until the route ends (non-roaming) or the
    /// scenario ends.
    fn drive<R: Rng + ?Sized>(mut self, start: Step, rng: &mut R) -> Vec<Sample> {
        let mut samples = Vec::new();
        let stride = self.cfg.speed * self.cfg.t_s;
        let cycle = self.cfg.queue_cycle.max(1);
        for t in start..self.cfg.duration {
            if let Some(until) = self.halted_until {
                if t < until {
                    self.position =
                        step_toward(&mut samples, self.position, self.position, self.cfg.t_s, MotionKind::QueuedStationary);
                    continue;
                }
                self.halted_until = None;
            }
            if self.path.is_empty() {
                if !self.roaming {
                    samples.push(Sample {
                        position: self.position,
                        velocity: Velocity2D::ZERO,
                        kind: MotionKind::Moving,
                    });
                    return samples;
                }
                let mut dest = self.grid.random_node(rng);
                while dest == self.node {
                    dest = self.grid.random_node(rng);
                }
                self.path = self.grid.route(self.node, dest, rng).into();
            }

            let mut budget = stride;
            let mut target = self.position;
            while budget > 0.0 {
                let Some(&next) = self.path.front() else { break };
                let next_pos = self.grid.node(next.0, next.1);
                let gap = distance(target, next_pos);
                if gap <= budget {
                    budget -= gap;
                    target = next_pos;
                    self.node = next;
                    self.path.pop_front();
                    if self.chokes.contains(&next) {
                        // wait for the next signal cycle, at least one step
                        let arrive = t + 1;
                        self.halted_until = Some((arrive / cycle + 1) * cycle);
                        break;
                    }
                } else {
                    target = target + (next_pos - target) * (budget / gap);
                    budget = 0.0;
                }
            }
            self.position = step_toward(&mut samples, self.position, target, self.cfg.t_s, MotionKind::Moving);
        }
        samples
    }
}

const PARKING_MARGIN: f64 = 8.0;

/// Large-scale scenario: roaming traffic, entering traffic, signalised choke
/// points and clusters of parked cars along the streets.
///
/// Ids: roaming vehicles first, then entering vehicles, then parked cars.
pub fn gen_town<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<Vec<VehicleRecord>, ScenarioError> {
    cfg.validate_common()?;
    let area = cfg.area;
    if !(cfg.block_size > 2.0 * PARKING_MARGIN) {
        return Err(ScenarioError::Config("block_size too small".into()));
    }
    if !(area.width() >= cfg.block_size && area.height() >= cfg.block_size) {
        return Err(ScenarioError::Config("area smaller than one street block".into()));
    }
    if cfg.n_parked > 0 && cfg.parked_spacing < 1.0 {
        return Err(ScenarioError::Config(format!(
            "parked cars would overlap: spacing {} m < 1 m",
            cfg.parked_spacing
        )));
    }
    if cfg.parked_offset[1] >= PARKING_MARGIN {
        return Err(ScenarioError::Config("parked_offset too large for town streets".into()));
    }
    if cfg.n_entering > 0 && cfg.entry_interval == 0 {
        return Err(ScenarioError::Config("entry_interval must be positive".into()));
    }

    let grid = Grid {
        origin: Position2D::new(area.min_x, area.min_y),
        block: cfg.block_size,
        nx: (area.width() / cfg.block_size).floor() as i64,
        ny: (area.height() / cfg.block_size).floor() as i64,
    };
    let mut all_nodes: Vec<(i64, i64)> = (0..=grid.nx).flat_map(|i| (0..=grid.ny).map(move |j| (i, j))).collect();
    all_nodes.shuffle(rng);
    let chokes: BTreeSet<(i64, i64)> = all_nodes.iter().take(cfg.n_choke_points as usize).copied().collect();

    let mut records = Vec::new();
    let mut next_id: VehicleId = 0;

    for _ in 0..cfg.n_moving {
        let a = grid.random_node(rng);
        let nbrs = grid.neighbours(a);
        let b = nbrs[rng.random_range(0..nbrs.len())];
        let f: f64 = rng.random();
        let (pa, pb) = (grid.node(a.0, a.1), grid.node(b.0, b.1));
        let driver = Driver {
            grid: &grid,
            chokes: &chokes,
            cfg,
            position: pa + (pb - pa) * f,
            node: b,
            path: VecDeque::from([b]),
            halted_until: None,
            roaming: true,
        };
        let samples = driver.drive(0, rng);
        records.push(VehicleRecord::new(next_id, 0, samples));
        next_id += 1;
    }

    for k in 0..cfg.n_entering {
        let enter = k * cfg.entry_interval;
        let a = grid.random_node(rng);
        let mut b = grid.random_node(rng);
        while b == a {
            b = grid.random_node(rng);
        }
        let path: VecDeque<_> = grid.route(a, b, rng).into();
        if enter >= cfg.duration {
            continue;
        }
        let driver = Driver {
            grid: &grid,
            chokes: &chokes,
            cfg,
            position: grid.node(a.0, a.1),
            node: a,
            path,
            halted_until: None,
            roaming: false,
        };
        let samples = driver.drive(enter, rng);
        if !samples.is_empty() {
            records.push(VehicleRecord::new(next_id, enter, samples));
        }
        next_id += 1;
    }

    for pos in place_parked(&grid, cfg, rng)? {
        records.push(parked_record(next_id, pos, cfg.duration));
        next_id += 1;
    }
    Ok(records)
}

/// Parked cars in clusters of consecutive kerb slots along random streets.
fn place_parked<R: Rng + ?Sized>(grid: &Grid, cfg: &ScenarioConfig, rng: &mut R) -> Result<Vec<Position2D>, ScenarioError> {
    if cfg.n_parked == 0 {
        return Ok(Vec::new());
    }
    // (edge start, direction unit, side) -> slots along the kerb
    let mut kerbs: Vec<(Position2D, Position2D, f64)> = Vec::new();
    for i in 0..=grid.nx {
        for j in 0..=grid.ny {
            let a = grid.node(i, j);
            if i < grid.nx {
                kerbs.push((a, Position2D::new(1.0, 0.0), 1.0));
                kerbs.push((a, Position2D::new(1.0, 0.0), -1.0));
            }
            if j < grid.ny {
                kerbs.push((a, Position2D::new(0.0, 1.0), 1.0));
                kerbs.push((a, Position2D::new(0.0, 1.0), -1.0));
            }
        }
    }
    let usable = grid.block - 2.0 * PARKING_MARGIN;
    let slots_per_kerb = (usable / cfg.parked_spacing).floor() as usize + 1;
    let capacity = kerbs.len() * slots_per_kerb;
    if capacity < cfg.n_parked as usize {
        return Err(ScenarioError::Config(format!(
            "cannot fit {} parked cars: only {capacity} kerb slots at {} m spacing",
            cfg.n_parked, cfg.parked_spacing
        )));
    }

    let mut taken = vec![false; capacity];
    let mut positions = Vec::with_capacity(cfg.n_parked as usize);
    let [lo, hi] = cfg.parked_offset;
    while positions.len() < cfg.n_parked as usize {
        let kerb = rng.random_range(0..kerbs.len());
        let first = rng.random_range(0..slots_per_kerb);
        let cluster = rng.random_range(3..=12usize);
        for slot in first..(first + cluster).min(slots_per_kerb) {
            if positions.len() == cfg.n_parked as usize {
                break;
            }
            let key = kerb * slots_per_kerb + slot;
            if taken[key] {
                continue;
            }
            taken[key] = true;
            let (a, dir, side) = kerbs[kerb];
            let offset = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let normal = Position2D::new(-dir.y, dir.x);
            let along = PARKING_MARGIN + slot as f64 * cfg.parked_spacing;
            positions.push(a + dir * along + normal * (side * offset));
        }
    }
    Ok(positions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::scenario_rng;

    fn circuit_cfg() -> ScenarioConfig {
        ScenarioConfig::circuit_default()
    }

    #[test]
    fn parse_two_rows() {
        let text = "t,id,x,y,vx,vy,kind\n0,7,0,0,1,0,moving\n1,7,1,0,1,0,moving\n";
        let recs = parse_trace(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].id, 7);
        assert_eq!(recs[0].samples.len(), 2);
    }

    #[test]
    fn parse_header_only() {
        let recs = parse_trace("t,id,x,y,vx,vy,kind\n".as_bytes()).unwrap();
        assert!(recs.is_empty());
    }

    #[test]
    fn parse_rejects_moving_parked_car() {
        let text = "t,id,x,y,vx,vy,kind\n0,3,1.0,2.0,5.0,0.0,parked\n";
        match parse_trace(text.as_bytes()) {
            Err(ScenarioError::Validation { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_duplicates_and_gaps() {
        let dup = "t,id,x,y,vx,vy,kind\n0,1,0,0,0,0,moving\n0,1,0,0,0,0,moving\n";
        assert!(matches!(parse_trace(dup.as_bytes()), Err(ScenarioError::Validation { .. })));
        let gap = "t,id,x,y,vx,vy,kind\n0,1,0,0,0,0,moving\n2,1,0,0,0,0,moving\n";
        assert!(matches!(parse_trace(gap.as_bytes()), Err(ScenarioError::Validation { .. })));
    }

    #[test]
    fn parse_reports_line_of_malformed_row() {
        let text = "# comment\nt,id,x,y,vx,vy,kind\n0,1,0,0,0,0,moving\n1,1,zero,0,0,0,moving\n";
        match parse_trace(text.as_bytes()) {
            Err(ScenarioError::Parse { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("x"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let short = "t,id,x,y,vx,vy,kind\n0,1,0,0\n";
        assert!(matches!(parse_trace(short.as_bytes()), Err(ScenarioError::Parse { line: 2, .. })));
    }

    #[test]
    fn parse_accepts_comments_and_queued() {
        let text = "# generated\nt,id,x,y,vx,vy,kind\n0,1,0,0,0,0,queued\n# mid\n1,1,0,0,1,0,moving\n";
        let recs = parse_trace(text.as_bytes()).unwrap();
        assert_eq!(recs[0].kind, MotionKind::Moving);
        assert_eq!(recs[0].samples[0].kind, MotionKind::QueuedStationary);
    }

    #[test]
    fn circuit_without_parked_cars_has_only_target() {
        let mut cfg = circuit_cfg();
        cfg.n_parked = 0;
        let recs = gen_circuit(&cfg, &mut scenario_rng(1)).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].kind, MotionKind::Moving);
    }

    /// Independent arc-length oracle for an axis-aligned square.
    fn square_point(side: f64, s: f64) -> Position2D {
        let s = s.rem_euclid(4.0 * side);
        match (s / side).floor() as i32 {
            0 => Position2D::new(s, 0.0),
            1 => Position2D::new(side, s - side),
            2 => Position2D::new(side - (s - 2.0 * side), side),
            _ => Position2D::new(0.0, side - (s - 3.0 * side)),
        }
    }

    #[test]
    fn circuit_parked_cars_at_even_stations() {
        let mut cfg = circuit_cfg();
        cfg.circuit = vec![
            Position2D::new(0.0, 0.0),
            Position2D::new(100.0, 0.0),
            Position2D::new(100.0, 100.0),
            Position2D::new(0.0, 100.0),
        ];
        cfg.parked_spacing = 40.0;
        cfg.n_parked = 10;
        let recs = gen_circuit(&cfg, &mut scenario_rng(3)).unwrap();
        let parked: Vec<_> = recs.iter().filter(|r| r.kind == MotionKind::Parked).collect();
        assert_eq!(parked.len(), 10);
        for (k, r) in parked.iter().enumerate() {
            let station = square_point(100.0, 40.0 * k as f64);
            let d = distance(station, r.samples[0].position);
            assert!(d >= cfg.parked_offset[0] - 1e-9 && d <= cfg.parked_offset[1] + 1e-9, "car {k} at {d} m");
            assert!(d <= 15.0);
        }
    }

    #[test]
    fn circuit_rejects_oversized_spacing() {
        let mut cfg = circuit_cfg();
        cfg.parked_spacing = 700.0;
        cfg.n_parked = 1;
        assert!(matches!(gen_circuit(&cfg, &mut scenario_rng(1)), Err(ScenarioError::Config(_))));
    }

    #[test]
    fn circuit_is_deterministic_and_consistent() {
        let cfg = circuit_cfg();
        let a = generate(ScenarioKind::Circuit, &cfg).unwrap();
        let b = generate(ScenarioKind::Circuit, &cfg).unwrap();
        assert_eq!(a, b);
        for r in &a {
            r.check_consistency(cfg.t_s, 0.0).unwrap();
            for s in &r.samples {
                assert!(s.velocity.speed() <= cfg.speed + 1e-9);
            }
        }
    }

    #[test]
    fn town_entry_schedule() {
        let mut cfg = ScenarioConfig::town_default();
        cfg.n_moving = 0;
        cfg.n_parked = 0;
        cfg.duration = 2000;
        let recs = gen_town(&cfg, &mut scenario_rng(5)).unwrap();
        assert_eq!(recs.len(), 95);
        let last = recs.iter().map(|r| r.start).max().unwrap();
        assert_eq!(last, 376);
    }

    #[test]
    fn town_with_only_parked_cars() {
        let mut cfg = ScenarioConfig::town_default();
        cfg.n_moving = 0;
        cfg.n_entering = 0;
        let recs = gen_town(&cfg, &mut scenario_rng(5)).unwrap();
        assert_eq!(recs.len(), cfg.n_parked as usize);
        assert!(recs.iter().all(|r| r.kind == MotionKind::Parked));
    }

    #[test]
    fn town_rejects_overlapping_parked_cars() {
        let mut cfg = ScenarioConfig::town_default();
        cfg.parked_spacing = 0.5;
        assert!(matches!(gen_town(&cfg, &mut scenario_rng(5)), Err(ScenarioError::Config(_))));
    }

    #[test]
    fn town_is_deterministic_consistent_and_queues() {
        let mut cfg = ScenarioConfig::town_default();
        cfg.n_moving = 40;
        cfg.n_entering = 10;
        cfg.n_parked = 200;
        cfg.duration = 400;
        let a = generate(ScenarioKind::Town, &cfg).unwrap();
        let b = generate(ScenarioKind::Town, &cfg).unwrap();
        assert_eq!(a, b);
        let mut queued_runs = 0;
        for r in &a {
            r.check_consistency(cfg.t_s, 0.0).unwrap();
            for s in &r.samples {
                if s.kind.is_stationary() {
                    assert!(s.velocity.is_zero());
                }
            }
            queued_runs += r
                .samples
                .windows(2)
                .filter(|w| w[0].kind == MotionKind::Moving && w[1].kind == MotionKind::QueuedStationary)
                .count();
        }
        assert!(queued_runs > 0, "expected some vehicles to queue at choke points");

        let parked: Vec<Position2D> = a
            .iter()
            .filter(|r| r.kind == MotionKind::Parked)
            .map(|r| r.samples[0].position)
            .collect();
        assert_eq!(parked.len(), 200);
        for (i, p) in parked.iter().enumerate() {
            for q in &parked[i + 1..] {
                assert!(distance(*p, *q) >= 1.0);
            }
        }
    }
}
