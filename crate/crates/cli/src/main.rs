//! `ptrace-race`: batch front end for the selective tracing pipeline.
//!
//! Every stage reads and writes plain files, so the stages can be run one
//! at a time (`analyze`, `instrument`, `run`, `decode`, `detect`) or all at
//! once (`pipeline`). Exit status: 0 clean, 1 races found, 2 error.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ptrace_race::corpus::fixture;
use ptrace_race::decode::decode;
use ptrace_race::detect::race_keys;
use ptrace_race::instrument::instrument;
use ptrace_race::ir::{parse_program, Program};
use ptrace_race::pipeline::{self, Algo, Mode};
use ptrace_race::sim::{run, SimConfig};

#[derive(Parser)]
#[command(
    name = "ptrace-race",
    version,
    about = "Selective trace-point instrumentation and offline race detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Value-set analysis plus trace-point selection.
    Analyze {
        program: String,
        #[arg(long, value_enum, default_value_t = ModeArg::Selective)]
        mode: ModeArg,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
    },
    /// Trace-point selection only (writes selection.json).
    Select {
        program: String,
        #[arg(long, value_enum, default_value_t = ModeArg::Selective)]
        mode: ModeArg,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
    },
    /// Inserts ptwrites for a selection; writes instrumented.asm and mapping.json.
    Instrument {
        program: String,
        #[arg(long)]
        selection: PathBuf,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
    },
    /// Simulates an (instrumented) program; writes cpuN.bin, sideband.bin, run.json.
    Run {
        program: String,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
    },
    /// Decodes the trace of a run directory into events.jsonl.
    Decode {
        /// Directory holding the run artifacts.
        run_dir: PathBuf,
        #[arg(long)]
        mapping: PathBuf,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
    },
    /// Runs race detection on decoded events; writes races.json.
    Detect {
        events: PathBuf,
        #[arg(long, value_enum, default_value_t = AlgoArg::Hb)]
        algo: AlgoArg,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
    },
    /// All stages end to end.
    Pipeline {
        program: String,
        #[command(flatten)]
        opts: PipelineArgs,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
    },
    /// The pipeline over a list of schedule seeds.
    Sweep {
        program: String,
        #[command(flatten)]
        opts: PipelineArgs,
        #[command(flatten)]
        sim: SimArgs,
        /// Seeds as a comma list and/or ranges, e.g. `0..20` or `1,5,9`.
        #[arg(long, default_value = "0..20")]
        seeds: String,
        /// Keep each seed's artifacts under OUT/seed-N.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Recomputes the statistics of an artifact directory.
    Stats {
        dir: PathBuf,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Selective,
    Naive,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Selective => Mode::Selective,
            ModeArg::Naive => Mode::Naive,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Hb,
    Lockset,
    Both,
}

impl From<AlgoArg> for Algo {
    fn from(a: AlgoArg) -> Algo {
        match a {
            AlgoArg::Hb => Algo::Hb,
            AlgoArg::Lockset => Algo::Lockset,
            AlgoArg::Both => Algo::Both,
        }
    }
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Selective)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = AlgoArg::Hb)]
    algo: AlgoArg,
    /// Exit 0 even when races are found.
    #[arg(long)]
    no_fail_on_race: bool,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    cpus: u32,
    /// Instructions per scheduling quantum.
    #[arg(long, default_value_t = 4)]
    quantum: u32,
    #[arg(long, default_value_t = 3)]
    cycles_per_instr: u64,
    /// PTW packets per CPU per drain window (unlimited when absent).
    #[arg(long)]
    capacity: Option<u64>,
    #[arg(long, default_value_t = 3000)]
    drain_interval: u64,
    /// PTW packets between periodic TSC packets (0 disables).
    #[arg(long, default_value_t = 32)]
    tsc_interval: u64,
    #[arg(long, default_value_t = 1_000_000)]
    max_steps: u64,
}

impl SimArgs {
    fn config(&self) -> SimConfig {
        SimConfig {
            seed: self.seed,
            cpus: self.cpus,
            quantum: self.quantum,
            cycles_per_instr: self.cycles_per_instr,
            buffer_capacity: self.capacity,
            drain_interval: self.drain_interval,
            tsc_interval: self.tsc_interval,
            max_steps: self.max_steps,
        }
    }
}

/// Loads a program from a path, or a built-in fixture as `fixture:NAME`.
fn load_program(spec: &str) -> Result<Program> {
    let text = match spec.strip_prefix("fixture:") {
        Some(name) => fixture(name)
            .with_context(|| format!("no fixture named `{name}`"))?
            .to_string(),
        None => fs::read_to_string(spec).with_context(|| format!("reading {spec}"))?,
    };
    parse_program(&text).with_context(|| format!("parse: {spec}"))
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (u64, u64) = (a.parse()?, b.parse()?);
            seeds.extend(a..b);
        } else {
            seeds.push(part.parse()?);
        }
    }
    if seeds.is_empty() {
        bail!("seed list `{s}` is empty");
    }
    Ok(seeds)
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn race_exit(races: usize, fail_on_race: bool) -> ExitCode {
    if races > 0 && fail_on_race {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn execute(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Analyze { program, mode, out } => {
            let p = load_program(&program)?;
            mkdir(&out)?;
            let (icfg, res) = pipeline::analysis(&p);
            let dump = serde_json::to_string_pretty(&res.dump(&p))?;
            fs::write(out.join("analysis.json"), dump)?;
            let sel = match Mode::from(mode) {
                Mode::Selective => ptrace_race::selector::select(&p, &icfg, &res),
                Mode::Naive => ptrace_race::selector::select_naive(&p, &res),
            };
            pipeline::write_selection(&out, &sel)?;
            println!("{}", serde_json::to_string(&sel.counts)?);
        }
        Command::Select { program, mode, out } => {
            let p = load_program(&program)?;
            mkdir(&out)?;
            let sel = pipeline::selection(&p, mode.into());
            pipeline::write_selection(&out, &sel)?;
            for w in &sel.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", serde_json::to_string(&sel.counts)?);
        }
        Command::Instrument {
            program,
            selection,
            out,
        } => {
            let p = load_program(&program)?;
            let sel = pipeline::read_selection(&selection)?;
            let (q, table) = instrument(&p, &sel).context("instrument")?;
            mkdir(&out)?;
            pipeline::write_instrumented(&out, &q, &table)?;
            println!("{} ptwrite instructions inserted", table.len());
        }
        Command::Run { program, sim, out } => {
            let p = load_program(&program)?;
            let a = run(&p, &sim.config()).context("run")?;
            mkdir(&out)?;
            pipeline::write_run(&out, &a)?;
            println!(
                "{} steps, {} PTW emitted, {} dropped",
                a.steps, a.emitted_ptw, a.dropped_ptw
            );
        }
        Command::Decode { run_dir, mapping, out } => {
            let table = pipeline::read_mapping(&mapping)?;
            let a = pipeline::read_run(&run_dir)?;
            let d =
                decode(&a.streams, &a.sideband, &table, a.config.cycles_per_instr, &a.loss_log).context("decode")?;
            mkdir(&out)?;
            pipeline::write_events(&out, &d.merged)?;
            println!("{} events", d.merged.len());
        }
        Command::Detect { events, algo, out } => {
            let evs = pipeline::read_events(&events)?;
            let races = pipeline::detect(&evs, algo.into())?;
            mkdir(&out)?;
            pipeline::write_races(&out, &races)?;
            println!("{} races", races.len());
            return Ok(race_exit(races.len(), true));
        }
        Command::Pipeline {
            program,
            opts,
            sim,
            out,
        } => {
            let p = load_program(&program)?;
            let result = pipeline::run_pipeline(&p, opts.mode.into(), &sim.config(), opts.algo.into())?;
            pipeline::write_all(&out, &result)?;
            println!("{}", result.stats);
            return Ok(race_exit(result.races.len(), !opts.no_fail_on_race));
        }
        Command::Sweep {
            program,
            opts,
            sim,
            seeds,
            out,
        } => {
            let p = load_program(&program)?;
            let mut all = BTreeSet::new();
            let mut rows = Vec::new();
            for seed in parse_seeds(&seeds)? {
                let cfg = SimConfig { seed, ..sim.config() };
                let r = pipeline::run_pipeline(&p, opts.mode.into(), &cfg, opts.algo.into())
                    .with_context(|| format!("seed {seed}"))?;
                if let Some(dir) = &out {
                    pipeline::write_all(&dir.join(format!("seed-{seed}")), &r)?;
                }
                let keys = race_keys(&r.races);
                rows.push(serde_json::json!({
                    "seed": seed,
                    "races": keys.len(),
                    "s_inst": r.stats.s_inst,
                    "d_inst": r.stats.d_inst,
                    "loss_percent": r.stats.loss_percent,
                }));
                all.extend(keys);
            }
            let distinct: Vec<String> = all.iter().map(|(a, x, y)| format!("{a:#x} {x} {y}")).collect();
            let summary = serde_json::json!({ "runs": rows, "distinct_races": distinct });
            println!("{}", serde_json::to_string_pretty(&summary)?);
            return Ok(race_exit(all.len(), !opts.no_fail_on_race));
        }
        Command::Stats { dir, json } => {
            let s = pipeline::stats_from_dir(&dir)?;
            if json {
                println!("{}", s.to_json());
            } else {
                println!("{s}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
