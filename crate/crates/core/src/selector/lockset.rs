//! Must-hold locksets, computed per function by forward dataflow.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;

use crate::ir::{Icfg, InstrId, Op, Operand, Pc, Program};
use crate::vsa::{Bounded, VsaResult};

/// A lock identity: the single global address a Lock operand can hold.
pub type LockId = u64;

/// What an Unlock (or a call) may release.
#[derive(Clone, Debug, PartialEq, Eq)]
enum Releases {
    All,
    Some(BTreeSet<LockId>),
}

impl Releases {
    fn none() -> Self {
        Releases::Some(BTreeSet::new())
    }

    fn merge(&mut self, other: &Releases) -> bool {
        match (&mut *self, other) {
            (Releases::All, _) => false,
            (_, Releases::All) => {
                *self = Releases::All;
                true
            }
            (Releases::Some(a), Releases::Some(b)) => {
                let n = a.len();
                a.extend(b.iter().copied());
                a.len() != n
            }
        }
    }

    fn apply(&self, held: &mut BTreeSet<LockId>) {
        match self {
            Releases::All => held.clear(),
            Releases::Some(ids) => held.retain(|l| !ids.contains(l)),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct LockSetResult {
    /// Locks held on every intra-procedural path to each instruction, before it executes.
    pub map: BTreeMap<InstrId, BTreeSet<LockId>>,
    pub warnings: Vec<String>,
}

impl LockSetResult {
    pub fn at(&self, id: &InstrId) -> Option<&BTreeSet<LockId>> {
        self.map.get(id)
    }
}

/// Identity acquired by a Lock operand, if it is a single known global.
pub fn lock_identity(res: &VsaResult, p: &Program, pc: Pc, operand: &Operand) -> Option<LockId> {
    let v = res.operand_before(p, pc, operand);
    if !v.heap.is_empty() || !v.stack.is_empty() || !v.consts.is_empty() {
        return None;
    }
    match v.global.elements() {
        Some(s) if s.len() == 1 => s.iter().next().copied(),
        _ => None,
    }
}

fn released_by(res: &VsaResult, p: &Program, pc: Pc, operand: &Operand) -> Releases {
    let v = res.operand_before(p, pc, operand);
    if !res.is_reached(pc) || v.is_bottom() {
        return Releases::All;
    }
    if v.consts.is_top() {
        return Releases::All;
    }
    match &v.global {
        Bounded::Top => Releases::All,
        Bounded::Set(gs) => {
            let mut ids: BTreeSet<LockId> = gs.clone();
            if let Some(cs) = v.consts.elements() {
                ids.extend(cs.iter().filter(|c| **c >= 0).map(|c| *c as u64));
            }
            Releases::Some(ids)
        }
    }
}

/// Locks each function may release, including through its callees.
fn may_release(p: &Program, res: &VsaResult) -> Vec<Releases> {
    let n = p.functions.len();
    let mut out = vec![Releases::none(); n];
    let mut callees: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for pc in p.pcs() {
        match p.op(pc) {
            Op::Unlock { lock } => {
                let r = released_by(res, p, pc, lock);
                out[pc.func].merge(&r);
            }
            Op::Call { func } => {
                callees[pc.func].insert(p.func_index(func).expect("validated"));
            }
            _ => {}
        }
    }
    let mut changed = true;
    while changed {
        changed = false;
        for f in 0..n {
            for &g in &callees[f] {
                let r = out[g].clone();
                changed |= out[f].merge(&r);
            }
        }
    }
    out
}

pub fn compute_locksets(p: &Program, icfg: &Icfg, res: &VsaResult) -> LockSetResult {
    let releases = may_release(p, res);
    let mut result = LockSetResult::default();
    let mut warned = BTreeSet::new();
    for (fi, f) in p.functions.iter().enumerate() {
        let len = f.instrs.len();
        // None = not reached yet (the universal set for must-intersection).
        let mut held_in: Vec<Option<BTreeSet<LockId>>> = vec![None; len];
        held_in[0] = Some(BTreeSet::new());
        let mut queue = VecDeque::from([0usize]);
        let mut queued = vec![false; len];
        queued[0] = true;
        while let Some(i) = queue.pop_front() {
            queued[i] = false;
            let pc = Pc::new(fi, i);
            let mut held = held_in[i].clone().expect("queued nodes have input");
            match p.op(pc) {
                Op::Lock { lock } => {
                    if let Some(id) = lock_identity(res, p, pc, lock) {
                        held.insert(id);
                    }
                }
                Op::Unlock { lock } => {
                    if let Some(id) = lock_identity(res, p, pc, lock) {
                        if !held.contains(&id) && warned.insert(pc) {
                            result
                                .warnings
                                .push(format!("{}: unlock of g{id} not held on every path", p.id_at(pc)));
                        }
                    }
                    released_by(res, p, pc, lock).apply(&mut held);
                }
                Op::Call { func } => {
                    releases[p.func_index(func).expect("validated")].apply(&mut held);
                }
                _ => {}
            }
            for s in icfg.intra_succs(pc) {
                let slot = &mut held_in[s.idx];
                let next = match slot {
                    None => held.clone(),
                    Some(cur) => cur.intersection(&held).copied().collect(),
                };
                if slot.as_ref() != Some(&next) {
                    *slot = Some(next);
                    if !queued[s.idx] {
                        queued[s.idx] = true;
                        queue.push_back(s.idx);
                    }
                }
            }
        }
        for (i, h) in held_in.into_iter().enumerate() {
            if let Some(h) = h {
                result.map.insert(p.id_at(Pc::new(fi, i)), h);
            }
        }
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;
    use crate::vsa::analyze;

    fn locksets(src: &str) -> (Program, LockSetResult) {
        let p = parse_program(src).unwrap();
        let g = Icfg::build(&p);
        let r = analyze(&g, &p);
        let l = compute_locksets(&p, &g, &r);
        (p, l)
    }

    fn at(l: &LockSetResult, id: &str) -> Vec<u64> {
        l.at(&id.parse().unwrap()).unwrap().iter().copied().collect()
    }

    #[test]
    fn straight_line_critical_section() {
        let (_, l) = locksets(
            "global g64 size 8\nglobal g128 size 8\nfn main {\n a: lock g64\n w: mov [g128], 1\n u: unlock g64\n x: halt\n}",
        );
        assert_eq!(at(&l, "main.w"), vec![64]);
        assert!(at(&l, "main.x").is_empty());
        assert!(l.warnings.is_empty());
    }

    #[test]
    fn one_armed_acquire_is_not_must_held() {
        let (_, l) = locksets(
            "global g64 size 8\nglobal g128 size 8\nfn main {\n c: cmp r0, 0\n je M\n lock g64\n M: mov [g128], 1\n halt\n}",
        );
        assert!(at(&l, "main.M").is_empty());
    }

    #[test]
    fn lock_through_register() {
        let (_, l) = locksets(
            "global g64 size 8\nglobal g128 size 8\nfn main {\n a: mov r3, g64\n lock r3\n w: mov [g128], 1\n unlock r3\n halt\n}",
        );
        assert_eq!(at(&l, "main.w"), vec![64]);
    }

    #[test]
    fn call_that_unlocks_drops_the_lock() {
        let (_, l) = locksets(
            "global g64 size 8\nglobal g128 size 8\n\
             fn main {\n lock g64\n call f\n w: mov [g128], 1\n halt\n}\n\
             fn f {\n unlock g64\n ret\n}",
        );
        assert!(at(&l, "main.w").is_empty());
    }

    #[test]
    fn unbalanced_unlock_warns() {
        let (_, l) = locksets("global g64 size 8\nfn main {\n u: unlock g64\n halt\n}");
        assert_eq!(l.warnings.len(), 1);
    }
}
