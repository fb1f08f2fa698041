//! `cpsim` command line: scenario generation, simulation sweeps and
//! coverage analysis.
//!
//! Settings come from an optional TOML file; flags override it. Exit code 2
//! signals a usage or configuration problem, 1 a failure while running.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::channel::{CommZone, NoiseModel};
use crate::coverage::{self, dsrc_radius, DsrcClass};
use crate::harness::{self, Algorithm, RunConfig, Sweep};
use crate::localize::{EkfParams, GcpsoParams};
use crate::model::{MotionKind, VehicleRecord};
use crate::policy::{Mode, PolicyConfig};
use crate::scenario::{self, ScenarioConfig, ScenarioKind};

#[derive(Debug, Parser)]
#[command(name = "cpsim", version, about = "Cooperative positioning simulator with parked-car anchors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a mobility trace.
    Gen(GenArgs),
    /// Run paired Traditional/Proposed ensembles and write a results table.
    Sim(SimArgs),
    /// Fraction of a transit area covered by parked cars.
    Coverage(CoverageArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Circuit,
    Town,
}

impl From<KindArg> for ScenarioKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Circuit => ScenarioKind::Circuit,
            KindArg::Town => ScenarioKind::Town,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlgorithmArg {
    Gcpso,
    Ekf,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Traditional,
    Proposed,
    Both,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trace CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trace CSV; generated from the scenario config when absent.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    /// Results CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for episodes (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long, value_enum)]
    pub algorithm: Option<AlgorithmArg>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Ranging noise standard deviation (m); repeatable.
    #[arg(long = "sigma-r")]
    pub sigma_r: Vec<f64>,
    /// Communication zone radius (m); repeatable.
    #[arg(long)]
    pub zone: Vec<f64>,
    #[arg(long = "n-runs")]
    pub n_runs: Option<u32>,
    /// Also write per-step errors next to the results file.
    #[arg(long = "dump-steps")]
    pub dump_steps: bool,
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Polygon CSV with header `polygon,x,y`.
    #[arg(long)]
    pub area: PathBuf,
    /// Parked positions: `x,y` CSV or a trace file.
    #[arg(long)]
    pub parked: PathBuf,
    /// Communication radius (m); repeatable.
    #[arg(long)]
    pub radius: Vec<f64>,
    /// DSRC device class; repeatable.
    #[arg(long, value_enum, ignore_case = true)]
    pub class: Vec<DsrcClass>,
    /// Grid cell size (m).
    #[arg(long = "cell-size")]
    pub cell_size: Option<f64>,
    /// Report CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub n_runs: u32,
    pub paired_seeds: bool,
    pub drop_probability: f64,
    pub tracked: usize,
    pub algorithms: Vec<Algorithm>,
    pub modes: Vec<Mode>,
    pub sigma_r: Vec<f64>,
    pub zones: Vec<f64>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            n_runs: 40,
            paired_seeds: true,
            drop_probability: 0.0,
            tracked: 1,
            algorithms: vec![Algorithm::Gcpso, Algorithm::Ekf],
            modes: vec![Mode::Traditional, Mode::Proposed],
            sigma_r: vec![0.2, 4.0],
            zones: vec![15.0],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub sigma_gps: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { sigma_gps: 6.0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EkfSection {
    pub sigma_q: f64,
    pub sigma_gamma: f64,
}

impl Default for EkfSection {
    fn default() -> Self {
        let d = EkfParams::default();
        Self {
            sigma_q: d.sigma_q,
            sigma_gamma: d.sigma_gamma,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoverageSection {
    pub cell_size: f64,
    pub radii: Vec<f64>,
}

impl Default for CoverageSection {
    fn default() -> Self {
        Self {
            cell_size: 1.0,
            radii: [DsrcClass::A, DsrcClass::B, DsrcClass::C, DsrcClass::D].map(dsrc_radius).to_vec(),
        }
    }
}

/// Contents of a `--config` file. Scenario keys left out take the defaults
/// of the selected scenario kind.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub scenario: toml::Table,
    pub run: RunSection,
    pub noise: NoiseSection,
    pub policy: PolicyConfig,
    pub gcpso: GcpsoParams,
    pub ekf: EkfSection,
    pub coverage: CoverageSection,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Scenario kind and settings; `kind` overrides the file.
    pub fn scenario(&self, kind: Option<ScenarioKind>) -> Result<(ScenarioKind, ScenarioConfig), CliError> {
        let mut table = self.scenario.clone();
        let from_file = match table.remove("kind") {
            Some(v) => Some(v.try_into::<ScenarioKind>().map_err(config_err)?),
            None => None,
        };
        let kind = kind.or(from_file).unwrap_or(ScenarioKind::Circuit);
        let defaults = toml::to_string(&ScenarioConfig::defaults_for(kind)).map_err(config_err)?;
        let mut merged: toml::Table = toml::from_str(&defaults).map_err(config_err)?;
        merged.extend(table);
        let mut cfg: ScenarioConfig = toml::Value::Table(merged).try_into().map_err(config_err)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok((kind, cfg))
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Sim(a) => cmd_sim(&a),
        Command::Coverage(a) => cmd_coverage(&a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn generate(file: &FileConfig, kind: Option<KindArg>, seed: Option<u64>) -> Result<(ScenarioKind, ScenarioConfig, Vec<VehicleRecord>), CliError> {
    let (kind, mut cfg) = file.scenario(kind.map(Into::into))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let trace = scenario::generate(kind, &cfg).map_err(config_err)?;
    Ok((kind, cfg, trace))
}

pub fn cmd_gen(a: &GenArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.config.as_deref())?;
    let (kind, _, trace) = generate(&file, a.kind, a.seed)?;
    let mut out = create(&a.out)?;
    scenario::write_trace(&mut out, &trace).map_err(runtime_err)?;
    out.flush().map_err(runtime_err)?;
    let parked = trace.iter().filter(|r| r.kind == MotionKind::Parked).count();
    println!(
        "{kind:?} trace: {} vehicles ({} moving, {parked} parked) -> {}",
        trace.len(),
        trace.len() - parked,
        a.out.display()
    );
    Ok(())
}

fn steps_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or("results".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.steps.csv"))
}

/// Resolved settings of a `sim` invocation.
pub fn sim_settings(a: &SimArgs, file: &FileConfig) -> Result<(RunConfig, Sweep), CliError> {
    let (_, mut scenario) = file.scenario(a.kind.map(Into::into))?;
    if let Some(s) = a.seed {
        scenario.seed = s;
    }
    let run = &file.run;
    let base = RunConfig {
        scenario,
        zone: CommZone { radius: 15.0 },
        noise: NoiseModel {
            sigma_range: 0.2,
            sigma_gps: file.noise.sigma_gps,
        },
        algorithm: Algorithm::Gcpso,
        policy: file.policy,
        gcpso: file.gcpso,
        ekf: EkfParams {
            sigma_q: file.ekf.sigma_q,
            sigma_gamma: file.ekf.sigma_gamma,
            ..EkfParams::default()
        },
        n_runs: a.n_runs.unwrap_or(run.n_runs),
        seed: a.seed.or(file.seed).unwrap_or(1),
        paired_seeds: run.paired_seeds,
        drop_probability: run.drop_probability,
        tracked: run.tracked,
    };
    let algorithms = match a.algorithm {
        None => run.algorithms.clone(),
        Some(AlgorithmArg::Gcpso) => vec![Algorithm::Gcpso],
        Some(AlgorithmArg::Ekf) => vec![Algorithm::Ekf],
        Some(AlgorithmArg::Both) => vec![Algorithm::Gcpso, Algorithm::Ekf],
    };
    let modes = match a.mode {
        None => run.modes.clone(),
        Some(ModeArg::Traditional) => vec![Mode::Traditional],
        Some(ModeArg::Proposed) => vec![Mode::Proposed],
        Some(ModeArg::Both) => vec![Mode::Traditional, Mode::Proposed],
    };
    let pick = |flag: &Vec<f64>, file: &Vec<f64>| if flag.is_empty() { file.clone() } else { flag.clone() };
    let sweep = Sweep {
        algorithms,
        modes,
        sigma_r: pick(&a.sigma_r, &run.sigma_r),
        zones: pick(&a.zone, &run.zones),
    };
    if sweep.algorithms.is_empty() || sweep.modes.is_empty() || sweep.sigma_r.is_empty() || sweep.zones.is_empty() {
        return Err(CliError::Config("nothing to run: empty algorithm, mode, sigma_r or zone list".into()));
    }
    for &s in &sweep.sigma_r {
        NoiseModel { sigma_range: s, ..base.noise }.validate().map_err(config_err)?;
    }
    for &z in &sweep.zones {
        CommZone::new(z).map_err(config_err)?;
    }
    base.validate().map_err(config_err)?;
    Ok((base, sweep))
}

pub fn cmd_sim(a: &SimArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.config.as_deref())?;
    let (base, sweep) = sim_settings(a, &file)?;
    let trace = match &a.trace {
        Some(p) => scenario::parse_trace(open(p)?).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?,
        None => generate(&file, a.kind, a.seed)?.2,
    };
    harness::check_trace(&trace, base.scenario.t_s).map_err(config_err)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(runtime_err)?;
    let cells = pool.install(|| harness::run_sweep(&base, &sweep, &trace)).map_err(|e| match e {
        harness::HarnessError::Config(m) => CliError::Config(m),
        other => CliError::Runtime(other.to_string()),
    })?;

    let rows: Vec<_> = cells.iter().flat_map(|c| c.rows.iter().cloned()).collect();
    let mut out = create(&a.out)?;
    harness::write_results(&mut out, &rows).map_err(runtime_err)?;
    out.flush().map_err(runtime_err)?;

    if a.dump_steps {
        let mut labels = Vec::new();
        for &alg in &sweep.algorithms {
            for &s in &sweep.sigma_r {
                for &z in &sweep.zones {
                    labels.push((alg, s, z));
                }
            }
        }
        let path = steps_path(&a.out);
        let mut dump = create(&path)?;
        harness::write_step_dump(&mut dump, &cells, &labels).map_err(runtime_err)?;
        dump.flush().map_err(runtime_err)?;
    }
    print!("{}", harness::format_summary(&rows));
    Ok(())
}

pub fn cmd_coverage(a: &CoverageArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.config.as_deref())?;
    let cell = a.cell_size.unwrap_or(file.coverage.cell_size);
    let mut radii: Vec<f64> = a.radius.clone();
    radii.extend(a.class.iter().map(|&c| dsrc_radius(c)));
    if radii.is_empty() {
        radii = file.coverage.radii.clone();
    }
    if let Some(r) = radii.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(CliError::Config(format!("radius must be positive, got {r}")));
    }
    if !(cell > 0.0 && cell.is_finite()) {
        return Err(CliError::Config(format!("cell size must be positive, got {cell}")));
    }

    let area = coverage::parse_area(open(&a.area)?, cell).map_err(|e| CliError::Runtime(format!("{}: {e}", a.area.display())))?;
    let parked = coverage::parse_parked(open(&a.parked)?).map_err(|e| CliError::Runtime(format!("{}: {e}", a.parked.display())))?;
    let mut rows = Vec::new();
    for &r in &radii {
        rows.push((r, coverage::coverage_report(&area, &parked, r).map_err(runtime_err)?));
    }
    let mut out = create(&a.out)?;
    coverage::write_report(&mut out, &rows).map_err(runtime_err)?;
    out.flush().map_err(runtime_err)?;
    println!("{:>8} {:>8} {:>8} {:>8} {:>9}", "radius", "level3", "level2", "level1", "uncovered");
    for (r, c) in &rows {
        println!(
            "{r:>8} {:>7.2}% {:>7.2}% {:>7.2}% {:>8.2}%",
            100.0 * c.fraction_level3,
            100.0 * c.fraction_level2,
            100.0 * c.fraction_level1,
            100.0 * c.fraction_uncovered
        );
    }
    Ok(())
}

/// Parses the process arguments, runs, and returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
