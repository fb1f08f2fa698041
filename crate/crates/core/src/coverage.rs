//! How much of a road network lies within range of parked cars.
//!
//! The transit area is rasterised on a square grid; every cell whose centre
//! falls inside the area counts the parked cars within the communication
//! radius. Holes are given as extra polygons and removed by the even-odd rule.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{MotionKind, Position2D};
use crate::scenario::{self, ScenarioError, TRACE_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
pub enum DsrcClass {
    A,
    B,
    C,
    D,
}

/// Nominal range of a DSRC device class, meters.
pub fn dsrc_radius(class: DsrcClass) -> f64 {
    match class {
        DsrcClass::A => 15.0,
        DsrcClass::B => 100.0,
        DsrcClass::C => 400.0,
        DsrcClass::D => 1000.0,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CoverageError {
    #[error("transit area is empty")]
    EmptyArea,
    #[error("radius must be positive, got {0}")]
    InvalidRadius(f64),
    #[error("cell size must be positive, got {0}")]
    InvalidCellSize(f64),
    #[error("polygon {0} is not simple")]
    NotSimple(usize),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Trace(#[from] ScenarioError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitArea {
    pub polygons: Vec<Vec<Position2D>>,
    pub cell_size: f64,
}

impl TransitArea {
    pub fn new(polygons: Vec<Vec<Position2D>>, cell_size: f64) -> Result<Self, CoverageError> {
        let area = Self { polygons, cell_size };
        area.validate()?;
        Ok(area)
    }

    pub fn rectangle(min: Position2D, max: Position2D, cell_size: f64) -> Self {
        Self {
            polygons: vec![vec![
                min,
                Position2D::new(max.x, min.y),
                max,
                Position2D::new(min.x, max.y),
            ]],
            cell_size,
        }
    }

    pub fn validate(&self) -> Result<(), CoverageError> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(CoverageError::InvalidCellSize(self.cell_size));
        }
        if self.polygons.iter().all(|p| p.len() < 3) {
            return Err(CoverageError::EmptyArea);
        }
        for (i, p) in self.polygons.iter().enumerate() {
            if !is_simple(p) {
                return Err(CoverageError::NotSimple(i));
            }
        }
        Ok(())
    }

    /// Sum of the polygon perimeters.
    pub fn perimeter(&self) -> f64 {
        self.polygons.iter().flat_map(|p| edges(p)).map(|(a, b)| (b - a).norm()).sum()
    }

    /// Net area under the even-odd rule, assuming holes lie inside their outer ring.
    pub fn net_area(&self) -> f64 {
        let mut areas: Vec<f64> = self.polygons.iter().map(|p| shoelace(p).abs()).collect();
        areas.sort_by(|a, b| b.total_cmp(a));
        areas.first().copied().unwrap_or(0.0) * 2.0 - areas.iter().sum::<f64>()
    }

    /// Bound on how far a fraction can move from its continuous value because
    /// of cell quantisation: perimeter times cell size over area.
    pub fn quantization_bound(&self) -> f64 {
        let a = self.net_area();
        if a <= 0.0 {
            return 1.0;
        }
        self.perimeter() * self.cell_size / a
    }

    fn bounds(&self) -> (Position2D, Position2D) {
        let mut lo = Position2D::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Position2D::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in self.polygons.iter().flatten() {
            lo = Position2D::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Position2D::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        (lo, hi)
    }
}

fn edges(poly: &[Position2D]) -> impl Iterator<Item = (Position2D, Position2D)> + '_ {
    (0..poly.len()).map(move |i| (poly[i], poly[(i + 1) % poly.len()]))
}

fn shoelace(poly: &[Position2D]) -> f64 {
    edges(poly).map(|(a, b)| a.x * b.y - b.x * a.y).sum::<f64>() * 0.5
}

fn cross(o: Position2D, a: Position2D, b: Position2D) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn segments_cross(p1: Position2D, p2: Position2D, q1: Position2D, q2: Position2D) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    (d1 > 0.0) != (d2 > 0.0) && (d3 > 0.0) != (d4 > 0.0) && d1 != 0.0 && d2 != 0.0 && d3 != 0.0 && d4 != 0.0
}

/// No two non-adjacent edges properly cross.
pub fn is_simple(poly: &[Position2D]) -> bool {
    let n = poly.len();
    if n < 3 {
        return true;
    }
    for i in 0..n {
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_cross(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

/// Even-odd containment over all polygons of the area.
pub fn contains(area: &TransitArea, p: Position2D) -> bool {
    let mut inside = false;
    for poly in &area.polygons {
        for (a, b) in edges(poly) {
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
    }
    inside
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoverageReport {
    pub fraction_level1: f64,
    pub fraction_level2: f64,
    pub fraction_level3: f64,
    pub fraction_uncovered: f64,
}

impl CoverageReport {
    pub fn covered(&self) -> f64 {
        self.fraction_level1 + self.fraction_level2 + self.fraction_level3
    }
}

/// Cell counts per coverage level: uncovered, 1, 2, 3 or more.
fn scan_row(area: &TransitArea, lo: Position2D, n_cols: usize, y: f64, parked: &[Position2D], radius: f64) -> [u64; 4] {
    let cell = area.cell_size;
    let col_of = |x: f64| (x - lo.x) / cell - 0.5;

    let mut crossings: Vec<f64> = area
        .polygons
        .iter()
        .flat_map(|p| edges(p))
        .filter(|(a, b)| (a.y > y) != (b.y > y))
        .map(|(a, b)| a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y))
        .collect();
    if crossings.len() < 2 {
        return [0; 4];
    }
    crossings.sort_by(f64::total_cmp);

    let mut diff = vec![0i32; n_cols + 1];
    let r2 = radius * radius;
    for car in parked {
        let dy = y - car.y;
        if dy * dy > r2 {
            continue;
        }
        let half = (r2 - dy * dy).sqrt();
        let first = col_of(car.x - half).ceil().max(0.0);
        let last = col_of(car.x + half).floor().min(n_cols as f64 - 1.0);
        if first > last {
            continue;
        }
        diff[first as usize] += 1;
        diff[last as usize + 1] -= 1;
    }

    let mut counts = [0u64; 4];
    let mut level = 0i32;
    let mut next = 0usize;
    for (col, d) in diff.iter().take(n_cols).enumerate() {
        level += d;
        let x = lo.x + (col as f64 + 0.5) * cell;
        while next < crossings.len() && crossings[next] <= x {
            next += 1;
        }
        // an odd number of crossings to the left means the centre is inside
        if next % 2 == 1 {
            counts[level.clamp(0, 3) as usize] += 1;
        }
    }
    counts
}

/// Fraction of the transit area covered by exactly one, exactly two, and
/// three or more parked cars within `radius`.
pub fn coverage_report(area: &TransitArea, parked: &[Position2D], radius: f64) -> Result<CoverageReport, CoverageError> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(CoverageError::InvalidRadius(radius));
    }
    area.validate()?;
    let (lo, hi) = area.bounds();
    let cell = area.cell_size;
    let n_cols = ((hi.x - lo.x) / cell).ceil().max(1.0) as usize;
    let n_rows = ((hi.y - lo.y) / cell).ceil().max(1.0) as usize;

    let counts = (0..n_rows)
        .into_par_iter()
        .map(|row| scan_row(area, lo, n_cols, lo.y + (row as f64 + 0.5) * cell, parked, radius))
        .reduce(|| [0u64; 4], |a, b| [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]);

    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(CoverageError::EmptyArea);
    }
    let t = total as f64;
    Ok(CoverageReport {
        fraction_uncovered: counts[0] as f64 / t,
        fraction_level1: counts[1] as f64 / t,
        fraction_level2: counts[2] as f64 / t,
        fraction_level3: counts[3] as f64 / t,
    })
}

fn parse_err(line: u64, message: impl Into<String>) -> CoverageError {
    CoverageError::Parse {
        line,
        message: message.into(),
    }
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input)
}

fn field(rec: &csv::StringRecord, i: usize, name: &str, line: u64) -> Result<f64, CoverageError> {
    let raw = rec.get(i).ok_or_else(|| parse_err(line, format!("missing {name}")))?;
    let v: f64 = raw.parse().map_err(|_| parse_err(line, format!("bad {name} '{raw}'")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("{name} is not finite")));
    }
    Ok(v)
}

/// Reads an area file with header `polygon,x,y`. Rows of one polygon must be
/// contiguous and list its vertices in ring order.
pub fn parse_area<R: Read>(input: R, cell_size: f64) -> Result<TransitArea, CoverageError> {
    let mut rdr = reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != ["polygon", "x", "y"] {
        return Err(parse_err(1, format!("expected header polygon,x,y, got {}", header.join(","))));
    }
    let mut polygons: Vec<Vec<Position2D>> = Vec::new();
    let mut ids: Vec<String> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(parse_err(line, format!("expected 3 fields, got {}", rec.len())));
        }
        let id = rec[0].to_string();
        let p = Position2D::new(field(&rec, 1, "x", line)?, field(&rec, 2, "y", line)?);
        if ids.last() != Some(&id) {
            if ids.contains(&id) {
                return Err(parse_err(line, format!("polygon '{id}' is not contiguous")));
            }
            ids.push(id);
            polygons.push(Vec::new());
        }
        polygons.last_mut().expect("pushed above").push(p);
    }
    if let Some(i) = polygons.iter().position(|p| p.len() < 3) {
        return Err(parse_err(0, format!("polygon '{}' has fewer than 3 vertices", ids[i])));
    }
    if polygons.is_empty() {
        return Err(CoverageError::EmptyArea);
    }
    TransitArea::new(polygons, cell_size)
}

/// Reads parked-car positions from an `x,y` file or from a trace file, in
/// which case every vehicle that is parked at its first step counts.
pub fn parse_parked<R: Read>(mut input: R) -> Result<Vec<Position2D>, CoverageError> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let first = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .unwrap_or("");
    let cols: Vec<&str> = first.split(',').map(str::trim).collect();
    if cols == TRACE_HEADER {
        let records = scenario::parse_trace(text.as_bytes())?;
        return Ok(records
            .iter()
            .filter(|r| r.samples.first().is_some_and(|s| s.kind == MotionKind::Parked))
            .map(|r| r.samples[0].position)
            .collect());
    }
    if cols != ["x", "y"] {
        return Err(parse_err(1, format!("expected header x,y or a trace header, got {first}")));
    }
    let mut out = Vec::new();
    for rec in reader(text.as_bytes()).records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(parse_err(line, format!("expected 2 fields, got {}", rec.len())));
        }
        out.push(Position2D::new(field(&rec, 0, "x", line)?, field(&rec, 1, "y", line)?));
    }
    Ok(out)
}

pub const REPORT_HEADER: [&str; 5] = ["radius", "level3", "level2", "level1", "uncovered"];

pub fn write_report<W: Write>(out: W, rows: &[(f64, CoverageReport)]) -> Result<(), CoverageError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for (radius, r) in rows {
        w.write_record([
            radius.to_string(),
            format!("{:.6}", r.fraction_level3),
            format!("{:.6}", r.fraction_level2),
            format!("{:.6}", r.fraction_level1),
            format!("{:.6}", r.fraction_uncovered),
        ])?;
    }
    w.flush()?;
    Ok(())
}
