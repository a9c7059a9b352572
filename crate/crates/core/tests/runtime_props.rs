use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use ptrace_race::corpus::full_corpus;
use ptrace_race::decode::{reconstruct_timestamps, Schedule};
use ptrace_race::instrument::instrument;
use ptrace_race::ir::{parse_program, Op, Program, PTW_LABEL_PREFIX};
use ptrace_race::pipeline::{run_pipeline, selection, Algo, Mode};
use ptrace_race::points::AccessKind;
use ptrace_race::sim::format::{decode_sideband, decode_stream, encode_sideband, encode_stream};
use ptrace_race::sim::{run, GtEntry, Packet, RunArtifacts, SidebandRecord, SimConfig, NO_THREAD};

fn corpus() -> Vec<(String, Program)> {
    full_corpus(25, 31)
        .into_iter()
        .map(|(n, s)| (n, parse_program(&s).unwrap()))
        .collect()
}

fn cfg(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        ..SimConfig::default()
    }
}

fn is_ptwrite(g: &GtEntry) -> bool {
    g.instr.label.starts_with(PTW_LABEL_PREFIX)
}

fn instrumented_runs() -> Vec<(String, Program, RunArtifacts)> {
    let mut out = Vec::new();
    for (name, p) in corpus() {
        for mode in [Mode::Selective, Mode::Naive] {
            let (q, _) = instrument(&p, &selection(&p, mode)).unwrap();
            for seed in 0..4 {
                let a = run(&q, &cfg(seed)).unwrap();
                out.push((format!("{name} {mode} seed {seed}"), q.clone(), a));
            }
        }
    }
    out
}

#[test]
fn instrumentation_preserves_semantics() {
    for (name, p) in corpus() {
        let (q, _) = instrument(&p, &selection(&p, Mode::Naive)).unwrap();
        for seed in 0..5 {
            let a = run(&p, &cfg(seed)).unwrap();
            let b = run(&q, &cfg(seed)).unwrap();
            assert_eq!(a.final_memory, b.final_memory, "{name} seed {seed}");
            let strip = |v: &[GtEntry]| -> Vec<(u32, String, Option<u64>)> {
                v.iter()
                    .filter(|g| !is_ptwrite(g))
                    .map(|g| (g.tid, g.instr.to_string(), g.address))
                    .collect()
            };
            assert_eq!(strip(&a.ground_truth), strip(&b.ground_truth), "{name} seed {seed}");
        }
    }
}

#[test]
fn branches_land_on_their_original_instruction() {
    for (name, p) in corpus() {
        let (q, _) = instrument(&p, &selection(&p, Mode::Naive)).unwrap();
        for pc in q.pcs() {
            let Some(target) = q.op(pc).target() else { continue };
            let mut i = q.resolve_label(pc.func, target);
            let instrs = &q.functions[pc.func].instrs;
            while instrs[i].op.is_ptwrite() {
                i += 1;
            }
            assert_eq!(instrs[i].label, target, "{name}: {}", q.id_at(pc));
        }
    }
}

#[test]
fn mapping_is_a_bijection() {
    for (name, p) in corpus() {
        for mode in [Mode::Selective, Mode::Naive] {
            let sel = selection(&p, mode);
            let (q, table) = instrument(&p, &sel).unwrap();
            let ids: BTreeSet<u32> = table.entries.iter().map(|e| e.ptw_id).collect();
            let in_code: BTreeSet<u32> = q
                .pcs()
                .filter_map(|pc| match q.op(pc) {
                    Op::Ptwrite { id, .. } => Some(*id),
                    _ => None,
                })
                .collect();
            assert_eq!(ids.len(), table.len(), "{name}");
            assert_eq!(ids, in_code, "{name}");
            let points: BTreeSet<_> = table.entries.iter().map(|e| (e.origin.clone(), e.access)).collect();
            let want: BTreeSet<_> = sel.t_trace.iter().map(|t| (t.instr.clone(), t.access)).collect();
            assert_eq!(points, want, "{name} {mode}");
        }
    }
}

#[test]
fn locks_are_mutually_exclusive() {
    for (name, _, a) in instrumented_runs() {
        let mut holder: BTreeMap<u64, u32> = BTreeMap::new();
        for g in &a.ground_truth {
            match (g.access, g.address) {
                (Some(AccessKind::LockAcq), Some(l)) => {
                    assert!(holder.insert(l, g.tid).is_none(), "{name}: lock {l:#x} taken twice");
                }
                (Some(AccessKind::LockRel), Some(l)) => {
                    assert_eq!(holder.remove(&l), Some(g.tid), "{name}: release of {l:#x}");
                }
                _ => {}
            }
        }
    }
}

#[test]
fn packets_agree_with_ground_truth() {
    for (name, _, a) in instrumented_runs() {
        for (cpu, stream) in a.streams.iter().enumerate() {
            let truth: Vec<&GtEntry> = a
                .ground_truth
                .iter()
                .filter(|g| g.cpu == cpu as u32 && is_ptwrite(g))
                .collect();
            let payloads: Vec<u64> = stream
                .iter()
                .filter_map(|p| match p {
                    Packet::Ptw { payload, .. } => Some(*payload),
                    _ => None,
                })
                .collect();
            let want: Vec<u64> = truth.iter().map(|g| g.base_value.unwrap()).collect();
            assert_eq!(payloads, want, "{name} cpu {cpu}");
            // TSC base plus accumulated CYC gives the true execution time.
            let ts: Vec<u64> = reconstruct_timestamps(cpu as u32, stream)
                .unwrap()
                .iter()
                .map(|p| p.timestamp)
                .collect();
            let want_ts: Vec<u64> = truth.iter().map(|g| g.ts).collect();
            assert_eq!(ts, want_ts, "{name} cpu {cpu}");
        }
    }
}

#[test]
fn sideband_records_every_switch() {
    for (name, _, a) in instrumented_runs() {
        let schedule = Schedule::new(&a.sideband).unwrap();
        for g in &a.ground_truth {
            assert_eq!(schedule.thread_at(g.cpu, g.ts), Some(g.tid), "{name}: {g:?}");
        }
        let mut current: BTreeMap<u32, u32> = BTreeMap::new();
        for r in &a.sideband {
            let prev = current.insert(r.cpu, r.tid_in).unwrap_or(NO_THREAD);
            assert_eq!(r.tid_out, prev, "{name}: {r:?}");
            assert_ne!(r.tid_in, r.tid_out, "{name}: redundant record {r:?}");
        }
    }
}

#[test]
fn merged_events_follow_each_stream() {
    for (name, p) in corpus() {
        for seed in 0..4 {
            let out = run_pipeline(&p, Mode::Selective, &cfg(seed), Algo::Hb).unwrap();
            let cpi = out.run.config.cycles_per_instr;
            let recorded: Vec<u64> = out
                .events
                .iter()
                .filter(|e| !e.derived)
                .map(|e| e.timestamp - cpi)
                .collect();
            for (cpu, stream) in out.run.streams.iter().enumerate() {
                let own: BTreeSet<u64> = reconstruct_timestamps(cpu as u32, stream)
                    .unwrap()
                    .iter()
                    .map(|p| p.timestamp)
                    .collect();
                let order: Vec<u64> = recorded.iter().copied().filter(|t| own.contains(t)).collect();
                assert_eq!(
                    order,
                    own.iter().copied().collect::<Vec<_>>(),
                    "{name} seed {seed} cpu {cpu}"
                );
            }
            let mut last = BTreeMap::new();
            for e in &out.events {
                let prev = last.insert(e.tid, e.timestamp).unwrap_or(0);
                assert!(
                    prev <= e.timestamp,
                    "{name} seed {seed}: thread {} goes back in time",
                    e.tid
                );
            }
        }
    }
}

fn packet() -> impl Strategy<Value = Packet> {
    prop_oneof![
        any::<u64>().prop_map(|tsc| Packet::Tsc { tsc }),
        any::<u64>().prop_map(|elapsed| Packet::Cyc { elapsed }),
        (any::<u64>(), any::<u32>()).prop_map(|(payload, id)| Packet::Ptw { payload, id }),
    ]
}

proptest! {
    #[test]
    fn stream_encoding_round_trips(packets in prop::collection::vec(packet(), 0..64)) {
        prop_assert_eq!(decode_stream(&encode_stream(&packets)).unwrap(), packets);
    }

    #[test]
    fn sideband_encoding_round_trips(
        records in prop::collection::vec((any::<u64>(), any::<u32>(), any::<u32>(), any::<u32>()), 0..32)
    ) {
        let records: Vec<SidebandRecord> = records
            .into_iter()
            .map(|(timestamp, cpu, tid_out, tid_in)| SidebandRecord { timestamp, cpu, tid_out, tid_in })
            .collect();
        prop_assert_eq!(decode_sideband(&encode_sideband(&records)).unwrap(), records);
    }

    #[test]
    fn truncated_streams_are_rejected(packets in prop::collection::vec(packet(), 1..16), cut in 1usize..13) {
        let bytes = encode_stream(&packets);
        // Cut inside the last record, never on a record boundary.
        let last = encode_stream(&packets[packets.len() - 1..]).len();
        let cut = cut.min(last - 1);
        prop_assert!(decode_stream(&bytes[..bytes.len() - cut]).is_err());
    }
}
