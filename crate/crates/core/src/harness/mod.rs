//! Config-driven experiment runner: partitions, toy runs, schedule
//! simulations, CSV/JSON reports and Gantt charts.

pub mod report;
pub mod toy;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapart::{
    check_partition, partition, write_manifest, DeviceShard, PartitionMode, PartitionSpec, ToyDataset,
};
use crate::error::{Error, Result};
use crate::lora::TrainConfig;
use crate::numerics::ToyConfig;
use crate::protocol::ElemType;
use crate::rng;
use crate::scheduler::{render_svg, simulate, validate_schedule, ClusterSpec, ScheduleMode, Scheme, SchemeResult};

pub use report::{check_ratios, Report, ReportRow, CSV_COLUMNS, REPORT_VERSION};
pub use toy::{ToyRun, ToySetup};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const PRESET_NAME: &str = "paper.gpt2";
pub const PAPER_GPT2: &str = include_str!("../../../../presets/paper-gpt2.toml");
pub const FAILED_MARKER: &str = "FAILED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireElem {
    F32,
    F64,
}

impl From<WireElem> for ElemType {
    fn from(w: WireElem) -> Self {
        match w {
            WireElem::F32 => ElemType::F32,
            WireElem::F64 => ElemType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataMode {
    pub mode: PartitionMode,
    #[serde(default)]
    pub alpha: Option<f64>,
}

impl DataMode {
    pub fn label(&self) -> String {
        match self.mode {
            PartitionMode::Iid => "iid".into(),
            PartitionMode::Dirichlet => format!("dirichlet({})", self.alpha.unwrap_or(1.0)),
        }
    }

    /// File-name form of [`label`](Self::label).
    pub fn slug(&self) -> String {
        match self.mode {
            PartitionMode::Iid => "iid".into(),
            PartitionMode::Dirichlet => format!("dirichlet-{}", self.alpha.unwrap_or(1.0)),
        }
    }

    pub fn spec(&self, num_devices: usize, seed: u64) -> PartitionSpec {
        match self.mode {
            PartitionMode::Iid => PartitionSpec::iid(num_devices, seed),
            PartitionMode::Dirichlet => PartitionSpec::dirichlet(num_devices, self.alpha.unwrap_or(1.0), seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub samples: usize,
    pub test_samples: usize,
    #[serde(default)]
    pub seed: u64,
    pub modes: Vec<DataMode>,
}

fn default_pooled() -> usize {
    72
}
fn default_local() -> usize {
    8
}
fn default_wire() -> WireElem {
    WireElem::F32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    #[serde(default = "default_pooled")]
    pub pooled_batch_size: usize,
    #[serde(default = "default_local")]
    pub local_batch_size: usize,
    #[serde(default = "default_wire")]
    pub wire: WireElem,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            pooled_batch_size: default_pooled(),
            local_batch_size: default_local(),
            wire: default_wire(),
        }
    }
}

fn default_mode() -> ScheduleMode {
    ScheduleMode::ZeroBubble
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_parallel() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub schemes: Vec<Scheme>,
    pub seeds: Vec<u64>,
    /// Toy training epochs per cell.
    pub rounds: u32,
    #[serde(default = "default_mode")]
    pub schedule_mode: ScheduleMode,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Run sweep cells on the rayon pool.
    #[serde(default = "default_parallel")]
    pub parallel: bool,
    pub cluster: ClusterSpec,
    pub data: DataConfig,
    pub toy: ToyConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn paper_gpt2() -> Self {
        Self::from_toml(PAPER_GPT2).expect("shipped preset is valid")
    }

    /// `paper.gpt2` selects the shipped preset; anything else is a file path.
    pub fn load(arg: &str) -> Result<Self> {
        if arg == PRESET_NAME {
            return Self::from_toml(PAPER_GPT2);
        }
        let text = fs::read_to_string(arg).map_err(|e| Error::Config(format!("{arg}: {e}")))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{arg}: {m}")),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.schemes.is_empty() {
            return Err(Error::Config("schemes must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        self.cluster.validate()?;
        self.toy.validate()?;
        self.train.validate()?;
        if self.toy.depth < 2 {
            return Err(Error::Config("toy.depth must be >= 2".into()));
        }
        let n = self.cluster.devices.len();
        if self.data.samples < n {
            return Err(Error::Config(format!(
                "data.samples {} < {n} devices",
                self.data.samples
            )));
        }
        if self.data.test_samples == 0 {
            return Err(Error::Config("data.test_samples must be > 0".into()));
        }
        if self.data.modes.is_empty() {
            return Err(Error::Config("data.modes must not be empty".into()));
        }
        for m in &self.data.modes {
            match (m.mode, m.alpha) {
                (PartitionMode::Iid, Some(_)) => return Err(Error::Config("data.modes: alpha given for iid".into())),
                (PartitionMode::Dirichlet, None) => {
                    return Err(Error::Config("data.modes: dirichlet needs alpha".into()))
                }
                _ => m.spec(n, 0).validate().map_err(|e| Error::Config(e.to_string()))?,
            }
        }
        if self.protocol.pooled_batch_size == 0 || self.protocol.local_batch_size == 0 {
            return Err(Error::Config("protocol batch sizes must be > 0".into()));
        }
        Ok(())
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub schemes: Vec<Scheme>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if !self.schemes.is_empty() {
            let mut s = self.schemes.clone();
            s.sort();
            s.dedup();
            cfg.schemes = s;
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: Report,
    pub out_dir: PathBuf,
}

/// Schedule simulation for every configured scheme, in scheme order.
/// Any validator finding is an invariant violation.
pub fn simulate_schemes(cfg: &ExperimentConfig) -> Result<Vec<SchemeResult>> {
    let mut schemes = cfg.schemes.clone();
    schemes.sort();
    schemes.dedup();
    schemes
        .into_iter()
        .map(|s| {
            let r = simulate(&cfg.cluster, s, cfg.schedule_mode)?;
            let issues = validate_schedule(&r.schedule);
            if !issues.is_empty() {
                return Err(Error::Invariant(format!("{} schedule: {}", s, issues.join("; "))));
            }
            Ok(r)
        })
        .collect()
}

/// Train and held-out sets drawn from one synthetic distribution.
pub fn datasets(cfg: &ExperimentConfig) -> Result<(ToyDataset, ToyDataset)> {
    let d = &cfg.data;
    let all = ToyDataset::synthetic(
        d.samples + d.test_samples,
        cfg.toy.classes,
        cfg.toy.width,
        cfg.toy.seq_len,
        d.seed,
    )?;
    let train: Vec<usize> = (0..d.samples).collect();
    let test: Vec<usize> = (d.samples..d.samples + d.test_samples).collect();
    let split = |idx: &[usize]| {
        let (inputs, labels) = all.gather(idx);
        ToyDataset {
            inputs,
            labels,
            seq_len: all.seq_len,
            classes: all.classes,
        }
    };
    Ok((split(&train), split(&test)))
}

/// Partition of the training set for one (data mode, seed) cell. The seed is
/// the cell seed, so different seeds give different shards.
pub fn cell_shards(cfg: &ExperimentConfig, train: &ToyDataset, mode: &DataMode, seed: u64) -> Result<Vec<DeviceShard>> {
    let n = cfg.cluster.devices.len();
    let mut shards = partition(&train.labels, &mode.spec(n, seed))?;
    check_partition(&shards, &train.labels)?;
    for (s, d) in shards.iter_mut().zip(&cfg.cluster.devices) {
        s.device_id = d.device_id;
    }
    Ok(shards)
}

fn manifest_path(dir: &Path, mode: &DataMode, seed: u64) -> PathBuf {
    dir.join("manifests").join(format!("{}-seed{seed}.csv", mode.slug()))
}

fn write_manifest_file(path: &Path, shards: &[DeviceShard]) -> Result<()> {
    let mut buf = Vec::new();
    write_manifest(shards, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Writes shard manifests for every (data mode, seed) cell.
pub fn write_partitions(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(cfg.output_dir.join("manifests"))?;
    let (train, _) = datasets(cfg)?;
    let mut paths = Vec::new();
    for mode in &cfg.data.modes {
        for &seed in &cfg.seeds {
            let path = manifest_path(&cfg.output_dir, mode, seed);
            write_manifest_file(&path, &cell_shards(cfg, &train, mode, seed)?)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Writes `schedules/<scheme>.json` and `gantt/<scheme>.svg`.
pub fn write_schedules(dir: &Path, sims: &[SchemeResult]) -> Result<()> {
    fs::create_dir_all(dir.join("schedules"))?;
    fs::create_dir_all(dir.join("gantt"))?;
    for r in sims {
        let mut json = r.schedule.to_json()?;
        json.push('\n');
        fs::write(dir.join("schedules").join(format!("{}.json", r.scheme)), json)?;
        fs::write(
            dir.join("gantt").join(format!("{}.svg", r.scheme)),
            render_svg(&r.schedule),
        )?;
    }
    Ok(())
}

fn toy_run(cfg: &ExperimentConfig, sim: &SchemeResult, setup: &ToySetup, record: Option<&Path>) -> Result<ToyRun> {
    match sim.scheme {
        Scheme::SplitFrozen => toy::run_splitfrozen(setup, &sim.depths, record),
        Scheme::CenLoRA => toy::run_cenlora(setup),
        Scheme::FedLoRA => toy::run_fedlora(setup),
        Scheme::SplitLoRA => toy::run_splitlora(setup, cfg.cluster.splitlora_cut),
    }
}

struct Cell<'a> {
    mode: &'a DataMode,
    seed: u64,
    sim: &'a SchemeResult,
}

fn run_inner(cfg: &ExperimentConfig, record: bool) -> Result<Report> {
    let dir = &cfg.output_dir;
    let sims = simulate_schemes(cfg)?;
    write_schedules(dir, &sims)?;
    let mut report = Report::new(&cfg.name);
    report.schedules = sims.iter().map(Into::into).collect();
    if cfg.rounds == 0 {
        return Ok(report);
    }
    fs::create_dir_all(dir.join("manifests"))?;
    if record {
        fs::create_dir_all(dir.join("frames"))?;
    }
    let (train, test) = datasets(cfg)?;
    let mut shards = Vec::new();
    for mode in &cfg.data.modes {
        for &seed in &cfg.seeds {
            let s = cell_shards(cfg, &train, mode, seed)?;
            write_manifest_file(&manifest_path(dir, mode, seed), &s)?;
            shards.push(((mode.slug(), seed), s));
        }
    }
    let mut cells = Vec::new();
    for sim in &sims {
        for mode in &cfg.data.modes {
            for &seed in &cfg.seeds {
                cells.push(Cell { mode, seed, sim });
            }
        }
    }
    let run_cell = |c: &Cell| -> Result<(ReportRow, report::Trajectory)> {
        let key = (c.mode.slug(), c.seed);
        let cell_shards = &shards.iter().find(|(k, _)| *k == key).expect("partitioned above").1;
        let setup = ToySetup {
            toy: &cfg.toy,
            train: &cfg.train,
            data: &train,
            test: &test,
            shards: cell_shards,
            rounds: cfg.rounds,
            pooled_batch_size: cfg.protocol.pooled_batch_size,
            local_batch_size: cfg.protocol.local_batch_size,
            elem: cfg.protocol.wire.into(),
            seed: rng::derive(c.seed, 0x5eed),
        };
        let frames = dir
            .join("frames")
            .join(format!("{}-{}-seed{}.log", c.sim.scheme, c.mode.slug(), c.seed));
        let rec = (record && c.sim.scheme == Scheme::SplitFrozen).then_some(frames.as_path());
        let run = toy_run(cfg, c.sim, &setup, rec)?;
        if !run.final_loss.is_finite() || run.train_losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::Invariant(format!(
                "{} {} seed {}: non-finite loss",
                c.sim.scheme,
                c.mode.label(),
                c.seed
            )));
        }
        let label = c.mode.label();
        let row = ReportRow::new(c.sim, &label, c.seed, run.final_loss);
        let traj = report::Trajectory {
            scheme: c.sim.scheme,
            data_mode: label,
            seed: c.seed,
            train_losses: run.train_losses,
            final_loss: run.final_loss,
        };
        Ok((row, traj))
    };
    let results: Vec<Result<_>> = if cfg.parallel {
        cells.par_iter().map(run_cell).collect()
    } else {
        cells.iter().map(run_cell).collect()
    };
    for r in results {
        let (row, traj) = r?;
        report.rows.push(row);
        report.trajectories.push(traj);
    }
    let key = |s: Scheme, m: &str, seed: u64| (s, m.to_string(), seed);
    report.rows.sort_by_key(|r| key(r.scheme, &r.data_mode, r.seed));
    report.trajectories.sort_by_key(|t| key(t.scheme, &t.data_mode, t.seed));
    report::fill_ratios(&mut report.rows);
    let bad = check_ratios(&report.rows, 1e-9);
    if !bad.is_empty() {
        return Err(Error::Invariant(bad.join("; ")));
    }
    Ok(report)
}

/// Runs every scheme × data mode × seed cell and writes `report.csv`,
/// `report.json`, schedules, Gantt charts and shard manifests under the
/// output directory. On failure a `FAILED` marker holding the error is left
/// next to whatever partial outputs exist.
pub fn run_experiment(cfg: &ExperimentConfig, record: bool) -> Result<RunOutput> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let marker = dir.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let result = run_inner(cfg, record).and_then(|report| {
        fs::write(dir.join("report.csv"), report::to_csv(&report.rows)?)?;
        fs::write(dir.join("report.json"), report.to_json()?)?;
        Ok(report)
    });
    match result {
        Ok(report) => Ok(RunOutput { report, out_dir: dir }),
        Err(e) => {
            let _ = fs::write(&marker, format!("{e}\n"));
            Err(e)
        }
    }
}

/// Schedules only: `schedules/`, `gantt/` and a `simulation.csv` summary.
pub fn run_simulation(cfg: &ExperimentConfig) -> Result<Vec<SchemeResult>> {
    cfg.validate()?;
    let sims = simulate_schemes(cfg)?;
    write_schedules(&cfg.output_dir, &sims)?;
    let mut rows: Vec<ReportRow> = sims.iter().map(|s| ReportRow::new(s, "none", 0, f64::NAN)).collect();
    report::fill_ratios(&mut rows);
    let csv = report::to_csv(&rows)?;
    fs::write(cfg.output_dir.join("simulation.csv"), csv)?;
    Ok(sims)
}
