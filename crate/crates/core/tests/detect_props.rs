use proptest::prelude::*;

use ptrace_race::decode::{EventKind, MemoryEvent};
use ptrace_race::detect::{detect_hb, detect_lockset, AccessType, ClockState, RaceReport, VectorClock};

fn clock() -> impl Strategy<Value = VectorClock> {
    prop::collection::vec(0u64..6, 0..5).prop_map(|v| {
        let mut c = VectorClock::new();
        for (i, x) in v.into_iter().enumerate() {
            c.set(i as u32, x);
        }
        c
    })
}

fn joined(a: &VectorClock, b: &VectorClock) -> VectorClock {
    let mut c = a.clone();
    c.join(b);
    c
}

/// Lock-disciplined random trace over up to 3 threads and 2 locks.
fn trace() -> impl Strategy<Value = Vec<MemoryEvent>> {
    prop::collection::vec((0u32..3, 0u8..6, 0usize..2, 0usize..4), 0..40).prop_map(|steps| {
        let mut held: [Option<u32>; 2] = [None, None];
        let mut out = Vec::new();
        for (i, (tid, op, which, origin)) in steps.into_iter().enumerate() {
            let lock = [64u64, 72][which];
            let kind = match op {
                0 | 1 => EventKind::Write,
                2 | 3 => EventKind::Read,
                4 if held[which].is_none() => {
                    held[which] = Some(tid);
                    EventKind::LockAcq
                }
                5 if held[which] == Some(tid) => {
                    held[which] = None;
                    EventKind::LockRel
                }
                _ => continue,
            };
            let address = if kind.is_memory() { [8u64, 16][which] } else { lock };
            out.push(MemoryEvent {
                tid,
                timestamp: i as u64,
                kind,
                address,
                origin: Some(format!("f.l{origin}").parse().unwrap()),
                derived: false,
            });
        }
        out
    })
}

fn well_formed(r: &RaceReport) -> bool {
    r.first.timestamp <= r.second.timestamp
        && r.first.tid != r.second.tid
        && (r.first.kind == AccessType::Write || r.second.kind == AccessType::Write)
}

proptest! {
    #[test]
    fn join_is_commutative(a in clock(), b in clock()) {
        prop_assert_eq!(joined(&a, &b).normalized(), joined(&b, &a).normalized());
    }

    #[test]
    fn join_is_associative(a in clock(), b in clock(), c in clock()) {
        prop_assert_eq!(joined(&joined(&a, &b), &c).normalized(), joined(&a, &joined(&b, &c)).normalized());
    }

    #[test]
    fn join_is_idempotent_upper_bound(a in clock(), b in clock()) {
        prop_assert_eq!(joined(&a, &a).normalized(), a.normalized());
        let j = joined(&a, &b);
        prop_assert!(a.leq(&j) && b.leq(&j));
    }

    #[test]
    fn clocks_only_grow(t in trace()) {
        let mut state = ClockState::default();
        for e in &t {
            let before = state.clock(e.tid);
            state.sync(e);
            let after = state.clock(e.tid);
            prop_assert!(after.get(e.tid) >= before.get(e.tid));
            if e.kind == EventKind::LockAcq {
                prop_assert!(before.leq(&after));
            }
        }
    }

    #[test]
    fn reports_are_well_formed_and_deterministic(t in trace()) {
        let hb = detect_hb(&t).unwrap();
        let ls = detect_lockset(&t).unwrap();
        prop_assert!(hb.iter().chain(&ls).all(well_formed));
        prop_assert_eq!(detect_hb(&t).unwrap(), hb);
        prop_assert_eq!(detect_lockset(&t).unwrap(), ls);
    }

    #[test]
    fn single_thread_never_races(t in trace()) {
        let one: Vec<MemoryEvent> = t.into_iter().map(|mut e| { e.tid = 0; e }).collect();
        prop_assert!(detect_hb(&one).unwrap().is_empty());
        prop_assert!(detect_lockset(&one).unwrap().is_empty());
    }
}
