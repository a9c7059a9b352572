//! End-to-end orchestration: analyze → select → instrument → run → decode
//! → detect, plus the on-disk artifact layout shared with the CLI.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{decode, events_from_json_lines, events_to_json_lines, MemoryEvent};
use crate::detect::{detect_hb, detect_lockset, RaceReport};
use crate::instrument::{instrument, MappingTable};
use crate::ir::{Icfg, Program};
use crate::selector::{select, select_naive, SelectionReport};
use crate::sim::format::{decode_sideband, decode_stream, encode_sideband, encode_stream};
use crate::sim::{loss_stats, run, RunArtifacts, SimConfig};
use crate::vsa::{analyze, VsaResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Selective,
    Naive,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    #[default]
    Hb,
    Lockset,
    Both,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "selective" => Ok(Mode::Selective),
            "naive" => Ok(Mode::Naive),
            _ => Err(format!("unknown mode `{s}` (expected selective or naive)")),
        }
    }
}

impl FromStr for Algo {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hb" => Ok(Algo::Hb),
            "lockset" => Ok(Algo::Lockset),
            "both" => Ok(Algo::Both),
            _ => Err(format!("unknown detector `{s}` (expected hb, lockset or both)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Selective => "selective",
            Mode::Naive => "naive",
        })
    }
}

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: &'static str, e: impl fmt::Display) -> Self {
        PipelineError {
            stage,
            message: e.to_string(),
        }
    }
}

pub fn analysis(p: &Program) -> (Icfg, VsaResult) {
    let icfg = Icfg::build(p);
    let res = analyze(&icfg, p);
    (icfg, res)
}

pub fn selection(p: &Program, mode: Mode) -> SelectionReport {
    let (icfg, res) = analysis(p);
    match mode {
        Mode::Selective => select(p, &icfg, &res),
        Mode::Naive => select_naive(p, &res),
    }
}

/// Runs the selected detectors; HB reports come first.
pub fn detect(events: &[MemoryEvent], algo: Algo) -> Result<Vec<RaceReport>, PipelineError> {
    let mut out = Vec::new();
    if matches!(algo, Algo::Hb | Algo::Both) {
        out.extend(detect_hb(events).map_err(|e| PipelineError::new("detect", e))?);
    }
    if matches!(algo, Algo::Lockset | Algo::Both) {
        out.extend(detect_lockset(events).map_err(|e| PipelineError::new("detect", e))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    /// Ptwrite instructions inserted statically.
    pub s_inst: usize,
    /// Ptwrite instructions executed at runtime (emitted plus dropped).
    pub d_inst: u64,
    pub emitted_ptw: u64,
    pub dropped_ptw: u64,
    /// Accesses reconstructed offline from derived relations.
    pub derived_events: usize,
    pub loss_percent: f64,
    pub loss_times: u64,
    pub hb_races: usize,
    pub lockset_races: usize,
    /// Wall-clock microseconds per stage; empty when recomputed from files.
    #[serde(default)]
    pub durations_us: BTreeMap<String, u64>,
}

impl StatsReport {
    pub fn compute(
        table: &MappingTable,
        run: &RunArtifacts,
        events: &[MemoryEvent],
        races: &[RaceReport],
    ) -> StatsReport {
        use crate::detect::Detector;
        let loss = loss_stats(run);
        StatsReport {
            s_inst: table.len(),
            d_inst: run.emitted_ptw + run.dropped_ptw,
            emitted_ptw: run.emitted_ptw,
            dropped_ptw: run.dropped_ptw,
            derived_events: events.iter().filter(|e| e.derived).count(),
            loss_percent: loss.loss_percent,
            loss_times: loss.loss_times,
            hb_races: races.iter().filter(|r| r.detector == Detector::HappensBefore).count(),
            lockset_races: races.iter().filter(|r| r.detector == Detector::Lockset).count(),
            durations_us: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}

impl fmt::Display for StatsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "S_inst         {}", self.s_inst)?;
        writeln!(f, "D_inst         {}", self.d_inst)?;
        writeln!(f, "derived events {}", self.derived_events)?;
        writeln!(f, "loss percent   {:.2}", self.loss_percent)?;
        writeln!(f, "loss times     {}", self.loss_times)?;
        writeln!(f, "hb races       {}", self.hb_races)?;
        write!(f, "lockset races  {}", self.lockset_races)
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub selection: SelectionReport,
    pub instrumented: Program,
    pub table: MappingTable,
    pub run: RunArtifacts,
    pub events: Vec<MemoryEvent>,
    pub races: Vec<RaceReport>,
    pub stats: StatsReport,
}

pub fn run_pipeline(p: &Program, mode: Mode, cfg: &SimConfig, algo: Algo) -> Result<PipelineOutput, PipelineError> {
    let mut durations = BTreeMap::new();
    let mut timed = |name: &str, t: Instant| {
        durations.insert(name.to_string(), t.elapsed().as_micros() as u64);
    };

    let t = Instant::now();
    let selection = selection(p, mode);
    timed("analyze", t);

    let t = Instant::now();
    let (instrumented, table) = instrument(p, &selection).map_err(|e| PipelineError::new("instrument", e))?;
    timed("instrument", t);

    let t = Instant::now();
    let artifacts = run(&instrumented, cfg).map_err(|e| PipelineError::new("run", e))?;
    timed("run", t);

    let t = Instant::now();
    let decoded = decode(
        &artifacts.streams,
        &artifacts.sideband,
        &table,
        cfg.cycles_per_instr,
        &artifacts.loss_log,
    )
    .map_err(|e| PipelineError::new("decode", e))?;
    timed("decode", t);

    let t = Instant::now();
    let races = detect(&decoded.merged, algo)?;
    timed("detect", t);

    let mut stats = StatsReport::compute(&table, &artifacts, &decoded.merged, &races);
    stats.durations_us = durations;
    Ok(PipelineOutput {
        selection,
        instrumented,
        table,
        run: artifacts,
        events: decoded.merged,
        races,
        stats,
    })
}

/// File names inside an artifact directory.
pub mod files {
    pub const SELECTION: &str = "selection.json";
    pub const INSTRUMENTED: &str = "instrumented.asm";
    pub const MAPPING: &str = "mapping.json";
    pub const RUN: &str = "run.json";
    pub const SIDEBAND: &str = "sideband.bin";
    pub const EVENTS: &str = "events.jsonl";
    pub const RACES: &str = "races.json";
    pub const STATS: &str = "stats.json";

    pub fn stream(cpu: usize) -> String {
        format!("cpu{cpu}.bin")
    }
}

fn io_err(stage: &'static str, path: &Path, e: impl fmt::Display) -> PipelineError {
    PipelineError::new(stage, format!("{}: {e}", path.display()))
}

fn write(stage: &'static str, path: PathBuf, bytes: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    fs::write(&path, bytes).map_err(|e| io_err(stage, &path, e))
}

fn read(stage: &'static str, path: PathBuf) -> Result<Vec<u8>, PipelineError> {
    fs::read(&path).map_err(|e| io_err(stage, &path, e))
}

fn read_text(stage: &'static str, path: PathBuf) -> Result<String, PipelineError> {
    fs::read_to_string(&path).map_err(|e| io_err(stage, &path, e))
}

pub fn write_selection(dir: &Path, s: &SelectionReport) -> Result<(), PipelineError> {
    write("select", dir.join(files::SELECTION), s.to_json())
}

pub fn read_selection(path: &Path) -> Result<SelectionReport, PipelineError> {
    let text = read_text("instrument", path.to_path_buf())?;
    serde_json::from_str(&text).map_err(|e| io_err("instrument", path, e))
}

pub fn write_instrumented(dir: &Path, p: &Program, table: &MappingTable) -> Result<(), PipelineError> {
    write("instrument", dir.join(files::INSTRUMENTED), p.to_string())?;
    write("instrument", dir.join(files::MAPPING), table.to_json())
}

pub fn read_mapping(path: &Path) -> Result<MappingTable, PipelineError> {
    let text = read_text("decode", path.to_path_buf())?;
    MappingTable::from_json(&text).map_err(|e| io_err("decode", path, e))
}

/// Binary streams and sideband are authoritative; `run.json` carries the
/// ground truth, loss log and a JSON mirror of the packets.
pub fn write_run(dir: &Path, a: &RunArtifacts) -> Result<(), PipelineError> {
    for (cpu, s) in a.streams.iter().enumerate() {
        write("run", dir.join(files::stream(cpu)), encode_stream(s))?;
    }
    write("run", dir.join(files::SIDEBAND), encode_sideband(&a.sideband))?;
    let json = serde_json::to_string_pretty(a).expect("run artifacts serialize");
    write("run", dir.join(files::RUN), json)
}

pub fn read_run(dir: &Path) -> Result<RunArtifacts, PipelineError> {
    let path = dir.join(files::RUN);
    let text = read_text("decode", path.clone())?;
    let mut a: RunArtifacts = serde_json::from_str(&text).map_err(|e| io_err("decode", &path, e))?;
    for cpu in 0..a.config.cpus as usize {
        let p = dir.join(files::stream(cpu));
        let bytes = read("decode", p.clone())?;
        a.streams[cpu] = decode_stream(&bytes).map_err(|e| io_err("decode", &p, e))?;
    }
    let p = dir.join(files::SIDEBAND);
    a.sideband = decode_sideband(&read("decode", p.clone())?).map_err(|e| io_err("decode", &p, e))?;
    Ok(a)
}

pub fn write_events(dir: &Path, events: &[MemoryEvent]) -> Result<(), PipelineError> {
    write("decode", dir.join(files::EVENTS), events_to_json_lines(events))
}

pub fn read_events(path: &Path) -> Result<Vec<MemoryEvent>, PipelineError> {
    let text = read_text("detect", path.to_path_buf())?;
    events_from_json_lines(&text).map_err(|e| io_err("detect", path, e))
}

pub fn write_races(dir: &Path, races: &[RaceReport]) -> Result<(), PipelineError> {
    let json = serde_json::to_string_pretty(races).expect("reports serialize");
    write("detect", dir.join(files::RACES), json)
}

pub fn read_races(path: &Path) -> Result<Vec<RaceReport>, PipelineError> {
    let text = read_text("stats", path.to_path_buf())?;
    serde_json::from_str(&text).map_err(|e| io_err("stats", path, e))
}

pub fn write_stats(dir: &Path, s: &StatsReport) -> Result<(), PipelineError> {
    write("stats", dir.join(files::STATS), s.to_json())
}

/// Writes every artifact of a pipeline run into `dir`.
pub fn write_all(dir: &Path, out: &PipelineOutput) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| io_err("pipeline", dir, e))?;
    write_selection(dir, &out.selection)?;
    write_instrumented(dir, &out.instrumented, &out.table)?;
    write_run(dir, &out.run)?;
    write_events(dir, &out.events)?;
    write_races(dir, &out.races)?;
    write_stats(dir, &out.stats)
}

/// Recomputes the statistics of an artifact directory from its files.
pub fn stats_from_dir(dir: &Path) -> Result<StatsReport, PipelineError> {
    let table = read_mapping(&dir.join(files::MAPPING))?;
    let run = read_run(dir)?;
    let events = read_events(&dir.join(files::EVENTS))?;
    let races = read_races(&dir.join(files::RACES))?;
    Ok(StatsReport::compute(&table, &run, &events, &races))
}
