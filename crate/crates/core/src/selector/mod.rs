//! Narrowing the shared trace points down to the set that must be recorded.

mod lockset;
mod redundant;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use lockset::{compute_locksets, lock_identity, LockId, LockSetResult};
pub use redundant::{redundant_elimination, DerivedRelation, Expr, Symbol, PROPAGATION_CAP};

use crate::ir::{Icfg, Op, Operand, Program};
use crate::points::{AccessKind, TracePoint};
use crate::vsa::{find_shared_trace_points, ValueSet, VsaResult};

/// Addresses a memory trace point may touch.
fn access_set(x: &TracePoint, res: &VsaResult, p: &Program) -> ValueSet {
    p.pc_of(&x.instr)
        .and_then(|pc| res.access_set(p, pc))
        .unwrap_or_else(ValueSet::top)
}

/// True when the two points can never touch the same address.
///
/// Stack projections take part too: a point with both global and stack
/// targets is still recorded, so a stack overlap is a possible race.
pub fn not_alias(x: &TracePoint, y: &TracePoint, res: &VsaResult, p: &Program) -> bool {
    let a = access_set(x, res, p);
    let b = access_set(y, res, p);
    !(a.global.overlaps(&b.global) || a.heap.overlaps(&b.heap) || a.stack.overlaps(&b.stack))
}

pub fn not_write(x: &TracePoint, y: &TracePoint) -> bool {
    x.access != AccessKind::Write && y.access != AccessKind::Write
}

/// True when every object `x` touches is a heap object that never leaves
/// the function (and therefore the thread) that allocated it.
pub fn is_owned(x: &TracePoint, res: &VsaResult, p: &Program) -> bool {
    let Some(pc) = p.pc_of(&x.instr) else {
        return false;
    };
    let Some((Operand::Mem { base, .. }, _)) = p.op(pc).memory_access() else {
        return false;
    };
    let v = res.reg_before(p, pc, base);
    if !v.global.is_empty() || !v.stack.is_empty() || !v.consts.is_empty() {
        return false;
    }
    let Some(sites) = v.heap.elements() else {
        return false;
    };
    if sites.is_empty() {
        return false;
    }
    let sh = &res.shared;
    // A stack address in shared memory lets other threads read frame slots,
    // which may hold heap pointers.
    if !sh.stack_wild.is_bottom() || sh.all_values().any(|v| !v.stack.is_empty()) {
        return false;
    }
    for site in sites {
        let mut allocated_here = false;
        for q in p.pcs() {
            if let Op::Alloc { site: s, .. } = p.op(q) {
                if s == site {
                    if q.func != pc.func {
                        return false;
                    }
                    allocated_here = true;
                }
            }
        }
        if !allocated_here {
            return false;
        }
        if sh.holds(&crate::vsa::ALoc::Heap(site.clone())) {
            return false;
        }
        for q in p.pcs().filter(|q| q.func == pc.func) {
            if matches!(p.op(q), Op::Call { .. }) {
                let escapes = res
                    .local_before(q)
                    .into_iter()
                    .flatten()
                    .any(|(k, vs)| matches!(k, crate::vsa::ALoc::Reg(_)) && vs.heap.contains(site));
                if escapes {
                    return false;
                }
            }
        }
    }
    true
}

pub fn not_concurrent(x: &TracePoint, y: &TracePoint, res: &VsaResult, p: &Program, locks: &LockSetResult) -> bool {
    if is_owned(x, res, p) || is_owned(y, res, p) {
        return true;
    }
    match (locks.at(&x.instr), locks.at(&y.instr)) {
        (Some(a), Some(b)) => a.intersection(b).next().is_some(),
        _ => false,
    }
}

/// Partitions the memory points of `t_shared` into race-free and may-race;
/// sync points go to may-race untouched.
pub fn must_race_free(
    t_shared: &BTreeSet<TracePoint>,
    res: &VsaResult,
    p: &Program,
    locks: &LockSetResult,
) -> (BTreeSet<TracePoint>, BTreeSet<TracePoint>) {
    let mem: Vec<&TracePoint> = t_shared.iter().filter(|t| t.access.is_memory()).collect();
    let owned: Vec<bool> = mem.iter().map(|t| is_owned(t, res, p)).collect();
    let sets: Vec<ValueSet> = mem.iter().map(|t| access_set(t, res, p)).collect();
    let mut race_free = BTreeSet::new();
    let mut may_race: BTreeSet<TracePoint> = t_shared.iter().filter(|t| !t.access.is_memory()).cloned().collect();
    for (i, x) in mem.iter().enumerate() {
        let conflicts = mem.iter().enumerate().any(|(j, y)| {
            let alias = sets[i].global.overlaps(&sets[j].global)
                || sets[i].heap.overlaps(&sets[j].heap)
                || sets[i].stack.overlaps(&sets[j].stack);
            let concurrent = !(owned[i] || owned[j])
                && !matches!((locks.at(&x.instr), locks.at(&y.instr)),
                    (Some(a), Some(b)) if a.intersection(b).next().is_some());
            alias && concurrent && !not_write(x, y)
        });
        if conflicts {
            may_race.insert((*x).clone());
        } else {
            race_free.insert((*x).clone());
        }
    }
    (race_free, may_race)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SelectionCounts {
    pub shared: usize,
    pub race_free: usize,
    pub may_race: usize,
    pub redundant: usize,
    pub trace: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SelectionReport {
    pub t_shared: BTreeSet<TracePoint>,
    pub t_race_free: BTreeSet<TracePoint>,
    pub t_may_race: BTreeSet<TracePoint>,
    pub t_redundant: BTreeSet<TracePoint>,
    pub t_trace: BTreeSet<TracePoint>,
    pub relations: BTreeSet<DerivedRelation>,
    pub counts: SelectionCounts,
    pub warnings: Vec<String>,
}

impl SelectionReport {
    fn from_parts(
        t_shared: BTreeSet<TracePoint>,
        t_race_free: BTreeSet<TracePoint>,
        t_may_race: BTreeSet<TracePoint>,
        t_trace: BTreeSet<TracePoint>,
        relations: BTreeSet<DerivedRelation>,
        warnings: Vec<String>,
    ) -> SelectionReport {
        let t_redundant: BTreeSet<TracePoint> = relations.iter().map(|r| r.derived.clone()).collect();
        let counts = SelectionCounts {
            shared: t_shared.len(),
            race_free: t_race_free.len(),
            may_race: t_may_race.len(),
            redundant: t_redundant.len(),
            trace: t_trace.len(),
        };
        SelectionReport {
            t_shared,
            t_race_free,
            t_may_race,
            t_redundant,
            t_trace,
            relations,
            counts,
            warnings,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Full selection: `T_trace = T_shared − T_raceFree − T_redundant`.
pub fn select(p: &Program, icfg: &Icfg, res: &VsaResult) -> SelectionReport {
    let t_shared = find_shared_trace_points(res, p);
    let locks = compute_locksets(p, icfg, res);
    let (race_free, may_race) = must_race_free(&t_shared, res, p, &locks);
    let (kept, relations) = redundant_elimination(&may_race, p, icfg, res);
    SelectionReport::from_parts(t_shared, race_free, may_race, kept, relations, locks.warnings)
}

/// Baseline selection: every shared point is recorded.
pub fn select_naive(p: &Program, res: &VsaResult) -> SelectionReport {
    let t_shared = find_shared_trace_points(res, p);
    SelectionReport::from_parts(
        t_shared.clone(),
        BTreeSet::new(),
        t_shared.clone(),
        t_shared,
        BTreeSet::new(),
        Vec::new(),
    )
}
