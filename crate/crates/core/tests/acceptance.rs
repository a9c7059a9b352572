//! Acceptance suite. Each check prints one PASS/FAIL line; the test fails
//! if any check fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ptrace_race::corpus::{fixture, full_corpus};
use ptrace_race::decode::{reconstruct_timestamps, EventKind, MemoryEvent};
use ptrace_race::detect::{detect_hb, race_keys, RaceKey};
use ptrace_race::ir::{parse_program, InstrId, Program};
use ptrace_race::pipeline::{run_pipeline, selection, write_all, Algo, Mode, PipelineOutput};
use ptrace_race::points::AccessKind;
use ptrace_race::sim::{run, GtEntry, Packet, Region, SimConfig};
use ptrace_race::vsa::ValueSet;

const GENERATED: usize = 50;
const CORPUS_SEED: u64 = 2024;
const SEEDS: u64 = 20;

type Check = Result<String, String>;

fn corpus() -> Vec<(String, Program)> {
    full_corpus(GENERATED, CORPUS_SEED)
        .into_iter()
        .map(|(n, s)| {
            let p = parse_program(&s).unwrap_or_else(|e| panic!("{n}: {e}"));
            (n, p)
        })
        .collect()
}

fn cfg(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        ..SimConfig::default()
    }
}

fn pipeline(p: &Program, mode: Mode, seed: u64) -> Result<PipelineOutput, String> {
    run_pipeline(p, mode, &cfg(seed), Algo::Hb).map_err(|e| e.to_string())
}

// 1 -------------------------------------------------------------------

fn zero_false_negatives(corpus: &[(String, Program)]) -> Check {
    let start = Instant::now();
    let (mut runs, mut racy) = (0, 0);
    for (name, p) in corpus {
        for seed in 0..SEEDS {
            let s = pipeline(p, Mode::Selective, seed)?;
            let n = pipeline(p, Mode::Naive, seed)?;
            let (ks, kn) = (race_keys(&s.races), race_keys(&n.races));
            if ks != kn {
                return Err(format!(
                    "{name} seed {seed}: selective {} races, naive {}; only naive: {:?}; only selective: {:?}",
                    ks.len(),
                    kn.len(),
                    kn.difference(&ks).collect::<Vec<_>>(),
                    ks.difference(&kn).collect::<Vec<_>>()
                ));
            }
            runs += 1;
            racy += usize::from(!ks.is_empty());
        }
    }
    let took = start.elapsed();
    if took > Duration::from_secs(300) {
        return Err(format!("took {took:?}"));
    }
    Ok(format!(
        "{} programs x {SEEDS} seeds, {runs} run pairs ({racy} with races) identical in {:.1?}",
        corpus.len(),
        took
    ))
}

// 2 -------------------------------------------------------------------

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/selection_counts.json")
}

fn strict_pruning() -> Check {
    let pruned = ["lock_guarded", "owned_heap", "stack_locals", "derived_fields", "stress"];
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for name in pruned.iter().chain(["fully_unguarded", "two_writers"].iter()) {
        let p = parse_program(fixture(name).unwrap()).unwrap();
        let s = selection(&p, Mode::Selective);
        let n = selection(&p, Mode::Naive);
        if pruned.contains(name) && s.t_trace.len() >= n.t_trace.len() {
            return Err(format!(
                "{name}: selective {} not below naive {}",
                s.t_trace.len(),
                n.t_trace.len()
            ));
        }
        if *name == "fully_unguarded" && s.t_trace != n.t_trace {
            return Err("fully_unguarded: selective and naive sets differ".into());
        }
        counts.insert(name.to_string(), (s.t_trace.len(), n.t_trace.len()));
    }
    let golden: BTreeMap<String, (usize, usize)> =
        serde_json::from_str(&fs::read_to_string(golden_path()).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    if golden != counts {
        return Err(format!("counts {counts:?} differ from golden {golden:?}"));
    }
    Ok(format!("(selective, naive) per fixture: {counts:?}"))
}

// 3 -------------------------------------------------------------------

fn region_within(r: &Region, vs: &ValueSet) -> bool {
    use ptrace_race::vsa::domain::StackSlot;
    match r {
        Region::Global { addr } => vs.global.contains(addr),
        Region::Heap { site, .. } => vs.heap.contains(site),
        Region::Stack { func, offset } => vs.stack.contains(&StackSlot::new(func.clone(), *offset)),
        Region::Unknown => false,
    }
}

fn vsa_soundness(corpus: &[(String, Program)]) -> Check {
    let mut checked = 0usize;
    for (name, p) in corpus {
        let (_, res) = ptrace_race::pipeline::analysis(p);
        for seed in 0..SEEDS {
            let a = run(p, &cfg(seed)).map_err(|e| format!("{name}: {e}"))?;
            for g in &a.ground_truth {
                if !matches!(g.access, Some(AccessKind::Read | AccessKind::Write)) {
                    continue;
                }
                let pc = p.pc_of(&g.instr).unwrap();
                let vs = res.access_set(p, pc).unwrap_or_default();
                let region = g.region.as_ref().unwrap_or(&Region::Unknown);
                if !region_within(region, &vs) {
                    return Err(format!(
                        "{name} seed {seed}: {} touched {region:?} outside {vs}",
                        g.instr
                    ));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} concrete accesses inside their static value sets"))
}

// 4 and 5 -------------------------------------------------------------

fn gt_kind(g: &GtEntry) -> Option<EventKind> {
    Some(match g.access? {
        AccessKind::Read => EventKind::Read,
        AccessKind::Write => EventKind::Write,
        AccessKind::LockAcq => EventKind::LockAcq,
        AccessKind::LockRel => EventKind::LockRel,
        AccessKind::ThreadFork => EventKind::Fork { child: g.child? },
        AccessKind::ThreadJoin => EventKind::Join { child: g.child? },
    })
}

/// Ground-truth executions per (tid, instruction), in execution order.
fn gt_by_site(gt: &[GtEntry]) -> HashMap<(u32, InstrId), Vec<&GtEntry>> {
    let mut m: HashMap<(u32, InstrId), Vec<&GtEntry>> = HashMap::new();
    for g in gt.iter().filter(|g| g.access.is_some()) {
        m.entry((g.tid, g.instr.clone())).or_default().push(g);
    }
    m
}

fn events_by_site(events: &[MemoryEvent], derived: bool) -> BTreeMap<(u32, InstrId), Vec<&MemoryEvent>> {
    let mut m: BTreeMap<(u32, InstrId), Vec<&MemoryEvent>> = BTreeMap::new();
    for e in events
        .iter()
        .filter(|e| e.derived == derived && e.kind != EventKind::Gap)
    {
        m.entry((e.tid, e.origin.clone().unwrap())).or_default().push(e);
    }
    m
}

fn fig2_pattern() -> Result<(), String> {
    let (t0, c0, c1) = (1000, 7, 5);
    let s = [
        Packet::Tsc { tsc: t0 },
        Packet::Cyc { elapsed: c0 },
        Packet::Ptw { payload: 1, id: 0 },
        Packet::Cyc { elapsed: c1 },
        Packet::Ptw { payload: 2, id: 1 },
    ];
    let ts: Vec<u64> = reconstruct_timestamps(0, &s)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|p| p.timestamp)
        .collect();
    if ts != vec![t0 + c0, t0 + c0 + c1] {
        return Err(format!("timestamps {ts:?}"));
    }
    Ok(())
}

fn decoder_round_trip(corpus: &[(String, Program)]) -> Check {
    fig2_pattern()?;
    let mut matched = 0usize;
    for (name, p) in corpus {
        for mode in [Mode::Selective, Mode::Naive] {
            for seed in 0..SEEDS {
                let out = pipeline(p, mode, seed)?;
                let gt = gt_by_site(&out.run.ground_truth);
                for ((tid, origin), evs) in events_by_site(&out.events, false) {
                    let want = gt.get(&(tid, origin.clone())).map(Vec::as_slice).unwrap_or(&[]);
                    let ctx = || format!("{name} {mode} seed {seed} t{tid} {origin}");
                    if want.len() != evs.len() {
                        return Err(format!("{}: {} decoded vs {} executed", ctx(), evs.len(), want.len()));
                    }
                    for (e, g) in evs.iter().zip(want) {
                        let address = if matches!(e.kind, EventKind::Fork { .. } | EventKind::Join { .. }) {
                            Some(0)
                        } else {
                            Some(e.address)
                        };
                        if Some(e.kind) != gt_kind(g) || address != g.address || e.timestamp != g.ts {
                            return Err(format!("{}: decoded {e:?} vs truth {g:?}", ctx()));
                        }
                        matched += 1;
                    }
                }
                // Every traced execution must appear.
                let traced: BTreeSet<&InstrId> = out.table.entries.iter().map(|e| &e.origin).collect();
                let executed = out
                    .run
                    .ground_truth
                    .iter()
                    .filter(|g| g.access.is_some() && traced.contains(&g.instr))
                    .count();
                let decoded = out.events.iter().filter(|e| !e.derived).count();
                if executed != decoded {
                    return Err(format!(
                        "{name} {mode} seed {seed}: {executed} traced executions, {decoded} events"
                    ));
                }
            }
        }
    }
    Ok(format!(
        "TSC + CYC + CYC pattern exact; {matched} recorded events match ground truth"
    ))
}

fn derived_reconstruction(corpus: &[(String, Program)]) -> Check {
    let (mut matched, mut programs) = (0usize, 0usize);
    for (name, p) in corpus {
        let sel = selection(p, Mode::Selective);
        if sel.t_redundant.is_empty() {
            continue;
        }
        programs += 1;
        let eliminated: BTreeSet<&InstrId> = sel.t_redundant.iter().map(|t| &t.instr).collect();
        for seed in 0..SEEDS {
            let out = pipeline(p, Mode::Selective, seed)?;
            let gt = gt_by_site(&out.run.ground_truth);
            let derived = events_by_site(&out.events, true);
            for ((tid, origin), execs) in &gt {
                if !eliminated.contains(origin) {
                    continue;
                }
                let evs = derived.get(&(*tid, origin.clone())).map(Vec::as_slice).unwrap_or(&[]);
                if evs.len() != execs.len() {
                    return Err(format!(
                        "{name} seed {seed} t{tid} {origin}: {} synthesized vs {} executed",
                        evs.len(),
                        execs.len()
                    ));
                }
                for (e, g) in evs.iter().zip(execs) {
                    if Some(e.address) != g.address || Some(e.kind) != gt_kind(g) || e.timestamp > g.ts {
                        return Err(format!("{name} seed {seed}: synthesized {e:?} vs truth {g:?}"));
                    }
                    matched += 1;
                }
            }
            if derived.keys().any(|(_, o)| !eliminated.contains(o)) {
                return Err(format!("{name} seed {seed}: derived event for a recorded point"));
            }
        }
    }
    if programs == 0 {
        return Err("no corpus program has an eliminated point".into());
    }
    Ok(format!(
        "{matched} eliminated accesses over {programs} programs rebuilt with exact addresses"
    ))
}

// 6 -------------------------------------------------------------------

fn random_trace(rng: &mut ChaCha8Rng) -> Vec<MemoryEvent> {
    let threads = rng.gen_range(1..=3u32);
    let use_fork = rng.gen_bool(0.5);
    let len = rng.gen_range(1..=12);
    // started, finished, forked
    let mut started = vec![false; threads as usize];
    let mut finished = vec![false; threads as usize];
    started[0] = true;
    if !use_fork {
        started.iter_mut().for_each(|s| *s = true);
    }
    let mut owner: [Option<u32>; 2] = [None, None];
    let origins = ["f.a", "f.b", "g.c", "g.d"];
    let mut out = Vec::new();
    let mut ts = 0;
    while out.len() < len {
        let t = rng.gen_range(0..threads);
        if !started[t as usize] || finished[t as usize] {
            continue;
        }
        ts += 1;
        let mk = |kind, address, origin: &str| MemoryEvent {
            tid: t,
            timestamp: ts,
            kind,
            address,
            origin: Some(origin.parse().unwrap()),
            derived: false,
        };
        let lock = rng.gen_range(0..2usize);
        let address = [64u64, 72][lock];
        match rng.gen_range(0..7) {
            0..=2 => {
                let kind = if rng.gen_bool(0.5) {
                    EventKind::Write
                } else {
                    EventKind::Read
                };
                let addr = [8u64, 16][rng.gen_range(0..2)];
                out.push(mk(kind, addr, origins[rng.gen_range(0..4)]));
            }
            3 if owner[lock].is_none() => {
                owner[lock] = Some(t);
                out.push(mk(EventKind::LockAcq, address, "s.l"));
            }
            4 if owner[lock] == Some(t) => {
                owner[lock] = None;
                out.push(mk(EventKind::LockRel, address, "s.u"));
            }
            5 if t == 0 && use_fork => {
                if let Some(c) = (1..threads).find(|c| !started[*c as usize]) {
                    started[c as usize] = true;
                    out.push(mk(EventKind::Fork { child: c }, 0, "s.f"));
                } else if let Some(c) = (1..threads).find(|c| started[*c as usize] && !finished[*c as usize]) {
                    // Child ends here, joined by the parent.
                    finished[c as usize] = true;
                    out.push(mk(EventKind::Join { child: c }, 0, "s.j"));
                }
            }
            _ => {}
        }
    }
    out
}

/// Happens-before by transitive closure over explicit edges.
#[allow(clippy::needless_range_loop)]
fn oracle_races(events: &[MemoryEvent]) -> BTreeSet<RaceKey> {
    let n = events.len();
    let mut reach = vec![vec![false; n]; n];
    let mut last: HashMap<u32, usize> = HashMap::new();
    for (j, e) in events.iter().enumerate() {
        if let Some(&i) = last.get(&e.tid) {
            reach[i][j] = true;
        }
        last.insert(e.tid, j);
        for i in 0..j {
            let a = &events[i];
            match (a.kind, e.kind) {
                (EventKind::LockRel, EventKind::LockAcq) if a.address == e.address => reach[i][j] = true,
                (EventKind::Fork { child }, _) if child == e.tid => reach[i][j] = true,
                (_, EventKind::Join { child }) if child == a.tid => reach[i][j] = true,
                _ => {}
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    let mut races = BTreeSet::new();
    for j in 0..n {
        for i in 0..j {
            let (a, b) = (&events[i], &events[j]);
            let mem = |e: &MemoryEvent| matches!(e.kind, EventKind::Read | EventKind::Write);
            if mem(a)
                && mem(b)
                && a.tid != b.tid
                && a.address == b.address
                && (a.kind == EventKind::Write || b.kind == EventKind::Write)
                && !reach[i][j]
            {
                let (x, y) = (a.origin.clone().unwrap(), b.origin.clone().unwrap());
                races.insert(if x <= y { (a.address, x, y) } else { (a.address, y, x) });
            }
        }
    }
    races
}

fn oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut racy = 0;
    for i in 0..1000 {
        let trace = random_trace(&mut rng);
        let got = race_keys(&detect_hb(&trace).map_err(|e| e.to_string())?);
        let want = oracle_races(&trace);
        if got != want {
            return Err(format!("trace {i}: detector {got:?} oracle {want:?}\n{trace:#?}"));
        }
        racy += usize::from(!want.is_empty());
    }
    Ok(format!(
        "1000 random traces agree with the closure oracle ({racy} racy)"
    ))
}

// 7 -------------------------------------------------------------------

const STRESS_CAPACITY: u64 = 100;

fn data_loss() -> Check {
    let p = parse_program(fixture("stress").unwrap()).unwrap();
    let mut worst_naive = f64::INFINITY;
    for seed in 0..10 {
        let c = SimConfig {
            seed,
            buffer_capacity: Some(STRESS_CAPACITY),
            ..SimConfig::default()
        };
        let n = run_pipeline(&p, Mode::Naive, &c, Algo::Hb).map_err(|e| e.to_string())?;
        let s = run_pipeline(&p, Mode::Selective, &c, Algo::Hb).map_err(|e| e.to_string())?;
        if n.stats.loss_percent <= 0.0 || s.stats.loss_percent != 0.0 {
            return Err(format!(
                "seed {seed}: naive loss {:.2}%, selective loss {:.2}%",
                n.stats.loss_percent, s.stats.loss_percent
            ));
        }
        worst_naive = worst_naive.min(n.stats.loss_percent);
    }
    Ok(format!(
        "capacity {STRESS_CAPACITY}/window: naive loses >= {worst_naive:.1}% on all 10 seeds, selective 0.0%"
    ))
}

// 8 -------------------------------------------------------------------

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut m = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        let mut bytes = fs::read(&path).unwrap();
        if name == "stats.json" {
            let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
            v.as_object_mut().unwrap().remove("durations_us");
            bytes = serde_json::to_vec(&v).unwrap();
        }
        m.insert(name, bytes);
    }
    m
}

fn determinism(corpus: &[(String, Program)]) -> Check {
    let root = std::env::temp_dir().join(format!("ptrace-race-determinism-{}", std::process::id()));
    let mut files = 0;
    for k in 0..10 {
        let (name, p) = &corpus[(k * 5) % corpus.len()];
        let seed = k as u64 * 3;
        let mut snaps = Vec::new();
        for rep in 0..3 {
            let dir = root.join(format!("{name}-{seed}-{rep}"));
            let out = run_pipeline(p, Mode::Selective, &cfg(seed), Algo::Both).map_err(|e| e.to_string())?;
            write_all(&dir, &out).map_err(|e| e.to_string())?;
            snaps.push(snapshot(&dir));
        }
        if snaps[0] != snaps[1] || snaps[1] != snaps[2] {
            return Err(format!("{name} seed {seed}: artifacts differ between runs"));
        }
        files += snaps[0].len();
    }
    let _ = fs::remove_dir_all(&root);
    Ok(format!(
        "10 (program, seed) pairs x 3 runs, {files} artifact files bit-identical"
    ))
}

/// Writes straight to stderr so the verdicts show even when the harness
/// captures test output.
fn report(line: String) {
    use std::io::Write;
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

#[test]
fn acceptance() {
    let corpus = corpus();
    assert!(corpus.len() >= 50);
    type Named<'a> = (&'a str, Box<dyn Fn() -> Check + 'a>);
    let checks: Vec<Named> = vec![
        ("1 zero false negatives", Box::new(|| zero_false_negatives(&corpus))),
        ("2 strict pruning", Box::new(strict_pruning)),
        ("3 VSA soundness", Box::new(|| vsa_soundness(&corpus))),
        ("4 decoder round trip", Box::new(|| decoder_round_trip(&corpus))),
        ("5 derived reconstruction", Box::new(|| derived_reconstruction(&corpus))),
        ("6 HB oracle equivalence", Box::new(oracle_equivalence)),
        ("7 data loss mirror", Box::new(data_loss)),
        ("8 determinism", Box::new(|| determinism(&corpus))),
    ];
    let mut failed = Vec::new();
    for (name, check) in &checks {
        match check() {
            Ok(detail) => report(format!("PASS  criterion {name}: {detail}")),
            Err(why) => {
                report(format!("FAIL  criterion {name}: {why}"));
                failed.push(*name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
