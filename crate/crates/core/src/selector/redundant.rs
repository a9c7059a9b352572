//! Redundant-register elimination.
//!
//! Each candidate register is expressed as `symbol + offset` by walking
//! backwards through its function. Two points whose expressions share a
//! symbol are linked by a constant delta, so only the earlier one needs a
//! runtime record as long as the symbol cannot change in between.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::ir::{Icfg, Op, Operand, Pc, Program, Register};
use crate::points::TracePoint;
use crate::vsa::{StackSlot, VsaResult};

/// Steps of backward propagation allowed per point.
pub const PROPAGATION_CAP: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DerivedRelation {
    pub derived: TracePoint,
    pub source: TracePoint,
    /// `value(derived.register) = value(source.register) + delta`.
    pub delta: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Symbol {
    EntryReg(Register),
    EntrySlot(i64),
    /// The value most recently produced by the instruction at this index.
    Def(usize),
    Fp,
    Const,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Expr {
    pub sym: Symbol,
    pub off: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Pending {
    Reg(Register),
    Slot(i64),
}

enum Step {
    Done(Expr),
    Continue(Pending, i64),
    Opaque,
}

struct FuncView<'a> {
    p: &'a Program,
    icfg: &'a Icfg,
    res: &'a VsaResult,
    func: usize,
}

impl FuncView<'_> {
    fn pc(&self, i: usize) -> Pc {
        Pc::new(self.func, i)
    }

    fn slot_escaped(&self, d: i64) -> bool {
        let slot = StackSlot::new(self.p.functions[self.func].name.clone(), d);
        let sh = &self.res.shared;
        !sh.stack_wild.is_bottom()
            || sh.stack_escaped.contains_key(&slot)
            || sh.all_values().any(|v| v.stack.contains(&slot))
    }

    /// Effect of instruction `q` on a pending value read after it.
    fn back(&self, q: usize, pend: Pending, off: i64) -> Step {
        let op = self.p.op(self.pc(q));
        if matches!(op, Op::Call { .. }) {
            return Step::Opaque;
        }
        match pend {
            Pending::Reg(r) => {
                if op.defined_register() != Some(r) {
                    return Step::Continue(pend, off);
                }
                match op {
                    Op::Mov { src, .. } => match *src {
                        Operand::Imm(v) => Step::Done(Expr {
                            sym: Symbol::Const,
                            off: v.wrapping_add(off),
                        }),
                        Operand::Reg(Register::Fp) => Step::Done(Expr { sym: Symbol::Fp, off }),
                        Operand::Reg(s) if s.is_general() => Step::Continue(Pending::Reg(s), off),
                        Operand::Mem {
                            base: Register::Fp,
                            disp,
                        } if !self.slot_escaped(disp) => Step::Continue(Pending::Slot(disp), off),
                        _ => Step::Done(Expr {
                            sym: Symbol::Def(q),
                            off,
                        }),
                    },
                    Op::Add {
                        src: Operand::Imm(v), ..
                    } => Step::Continue(pend, off.wrapping_add(*v)),
                    Op::Sub {
                        src: Operand::Imm(v), ..
                    } => Step::Continue(pend, off.wrapping_sub(*v)),
                    _ => Step::Done(Expr {
                        sym: Symbol::Def(q),
                        off,
                    }),
                }
            }
            Pending::Slot(d) => match op.memory_access() {
                Some((
                    Operand::Mem {
                        base: Register::Fp,
                        disp,
                    },
                    true,
                )) if disp == d => {
                    let Op::Mov { src, .. } = op else {
                        return Step::Opaque;
                    };
                    match *src {
                        Operand::Imm(v) => Step::Done(Expr {
                            sym: Symbol::Const,
                            off: v.wrapping_add(off),
                        }),
                        Operand::Reg(Register::Fp) => Step::Done(Expr { sym: Symbol::Fp, off }),
                        Operand::Reg(s) if s.is_general() => Step::Continue(Pending::Reg(s), off),
                        _ => Step::Opaque,
                    }
                }
                Some((Operand::Mem { base, .. }, true)) if base != Register::Fp => {
                    let may_hit_stack = self
                        .res
                        .access_set(self.p, self.pc(q))
                        .is_none_or(|s| !s.stack.is_empty());
                    if may_hit_stack {
                        Step::Opaque
                    } else {
                        Step::Continue(pend, off)
                    }
                }
                _ => Step::Continue(pend, off),
            },
        }
    }

    /// Symbolic value of `r` just before instruction `at` executes.
    pub fn expr_before(&self, at: usize, r: Register) -> Option<Expr> {
        let mut results: BTreeSet<Expr> = BTreeSet::new();
        let mut seen: HashSet<(usize, Pending, i64)> = HashSet::new();
        let mut stack = vec![(at, Pending::Reg(r), 0i64)];
        let mut steps = 0usize;
        while let Some((i, pend, off)) = stack.pop() {
            if !seen.insert((i, pend, off)) {
                // Same question at the same place: the cycle adds nothing new.
                continue;
            }
            steps += 1;
            if steps > PROPAGATION_CAP {
                return None;
            }
            if i == 0 {
                results.insert(Expr {
                    sym: match pend {
                        Pending::Reg(r) => Symbol::EntryReg(r),
                        Pending::Slot(d) => Symbol::EntrySlot(d),
                    },
                    off,
                });
            }
            for q in self.icfg.intra_preds(self.pc(i)) {
                match self.back(q.idx, pend, off) {
                    Step::Opaque => return None,
                    Step::Done(e) => {
                        results.insert(e);
                    }
                    Step::Continue(p2, o2) => stack.push((q.idx, p2, o2)),
                }
            }
            if results.len() > 1 {
                return None;
            }
        }
        if results.len() == 1 {
            results.into_iter().next()
        } else {
            None
        }
    }

    fn len(&self) -> usize {
        self.p.functions[self.func].instrs.len()
    }

    fn succs(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.icfg.intra_succs(self.pc(i)).iter().map(|s| s.idx)
    }

    fn preds(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.icfg.intra_preds(self.pc(i)).iter().map(|s| s.idx)
    }

    /// Reverse postorder of instructions reachable from the function entry.
    fn rpo(&self) -> Vec<usize> {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut post = Vec::with_capacity(n);
        let mut stack: Vec<(usize, Vec<usize>)> = vec![(0, self.succs(0).collect())];
        seen[0] = true;
        while let Some((node, rest)) = stack.last_mut() {
            if let Some(s) = rest.pop() {
                if !seen[s] {
                    seen[s] = true;
                    let next = self.succs(s).collect();
                    stack.push((s, next));
                }
            } else {
                post.push(*node);
                stack.pop();
            }
        }
        post.reverse();
        post
    }

    /// Dominator sets of reachable instructions.
    fn dominators(&self, rpo: &[usize]) -> Vec<Option<BTreeSet<usize>>> {
        let mut dom: Vec<Option<BTreeSet<usize>>> = vec![None; self.len()];
        dom[0] = Some(BTreeSet::from([0]));
        let mut changed = true;
        while changed {
            changed = false;
            for &i in rpo.iter().skip(1) {
                let mut acc: Option<BTreeSet<usize>> = None;
                for q in self.preds(i) {
                    if let Some(d) = &dom[q] {
                        acc = Some(match acc {
                            None => d.clone(),
                            Some(a) => a.intersection(d).copied().collect(),
                        });
                    }
                }
                let mut new = acc.unwrap_or_default();
                new.insert(i);
                if dom[i].as_ref() != Some(&new) {
                    dom[i] = Some(new);
                    changed = true;
                }
            }
        }
        dom
    }

    /// Instructions that can execute after `x` and before `y` without `x`
    /// executing again (earlier executions of `y` included).
    fn between(&self, x: usize, y: usize) -> BTreeSet<usize> {
        let n = self.len();
        let mut fwd = vec![false; n];
        let mut stack: Vec<usize> = self.succs(x).filter(|s| *s != x).collect();
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut fwd[i], true) {
                continue;
            }
            stack.extend(self.succs(i).filter(|s| *s != x));
        }
        let mut bwd = vec![false; n];
        let mut stack: Vec<usize> = self.preds(y).filter(|q| *q != x).collect();
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut bwd[i], true) {
                continue;
            }
            stack.extend(self.preds(i).filter(|q| *q != x));
        }
        (0..n).filter(|i| fwd[*i] && bwd[*i]).collect()
    }

    fn may_link(&self, x: usize, ex: Expr, y: usize, ey: Expr) -> bool {
        if ex.sym != ey.sym || ex.sym == Symbol::Fp {
            return false;
        }
        if let Symbol::Def(q) = ex.sym {
            if q == x {
                return false;
            }
        }
        let between = self.between(x, y);
        if between.contains(&y) || !self.executes_once_per(x, y) {
            return false;
        }
        between.into_iter().all(|n| {
            let op = self.p.op(self.pc(n));
            let redefines = matches!(ex.sym, Symbol::Def(q) if q == n);
            !(redefines || op.is_sync() || matches!(op, Op::Call { .. } | Op::Ret | Op::Halt))
        })
    }

    /// Nodes reachable from the successors of `from` without entering `avoid`.
    fn reach_avoiding(&self, from: usize, avoid: usize) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut stack: Vec<usize> = self.succs(from).filter(|s| *s != avoid).collect();
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                continue;
            }
            stack.extend(self.succs(i).filter(|s| *s != avoid));
        }
        seen
    }

    /// Every execution of `x` is followed by `y` before `x` runs again or
    /// the function exits, so a derived event can be synthesized for each
    /// recorded one. (`y` not repeating on its own is checked by the caller.)
    fn executes_once_per(&self, x: usize, y: usize) -> bool {
        let seen = self.reach_avoiding(x, y);
        if seen[x] {
            return false;
        }
        let exits_early = (0..self.len()).any(|i| (seen[i] || i == x) && self.succs(i).next().is_none());
        !exits_early
    }
}

fn base_register(p: &Program, pc: Pc) -> Option<Register> {
    match p.op(pc).memory_access()? {
        (Operand::Mem { base, .. }, _) if base.is_general() => Some(base),
        _ => None,
    }
}

/// Splits memory-access points into those that need a runtime record and
/// those reconstructible from one of them.
pub fn redundant_elimination(
    points: &BTreeSet<TracePoint>,
    p: &Program,
    icfg: &Icfg,
    res: &VsaResult,
) -> (BTreeSet<TracePoint>, BTreeSet<DerivedRelation>) {
    let mut kept = BTreeSet::new();
    let mut relations = BTreeSet::new();
    let mut by_func: BTreeMap<usize, Vec<(Pc, &TracePoint)>> = BTreeMap::new();
    for t in points {
        match p.pc_of(&t.instr) {
            Some(pc) if t.access.is_memory() => by_func.entry(pc.func).or_default().push((pc, t)),
            _ => {
                kept.insert(t.clone());
            }
        }
    }
    for (func, pts) in by_func {
        let view = FuncView { p, icfg, res, func };
        let rpo = view.rpo();
        let order: BTreeMap<usize, usize> = rpo.iter().enumerate().map(|(k, i)| (*i, k)).collect();
        let dom = view.dominators(&rpo);
        let mut pts = pts;
        pts.sort_by_key(|(pc, t)| (order.get(&pc.idx).copied().unwrap_or(usize::MAX), t.instr.clone()));
        let mut sources: Vec<(usize, Expr, &TracePoint)> = Vec::new();
        for (pc, t) in pts {
            let expr = match (base_register(p, pc), t.register) {
                (Some(b), Some(r)) if b == r && order.contains_key(&pc.idx) => view.expr_before(pc.idx, r),
                _ => None,
            };
            let Some(ey) = expr else {
                kept.insert(t.clone());
                continue;
            };
            let doms = dom[pc.idx].as_ref();
            let found = sources.iter().find(|(x, ex, _)| {
                *x != pc.idx && doms.is_some_and(|d| d.contains(x)) && view.may_link(*x, *ex, pc.idx, ey)
            });
            match found {
                Some((_, ex, src)) => {
                    relations.insert(DerivedRelation {
                        derived: t.clone(),
                        source: (*src).clone(),
                        delta: ey.off.wrapping_sub(ex.off),
                    });
                }
                None => {
                    kept.insert(t.clone());
                    sources.push((pc.idx, ey, t));
                }
            }
        }
    }
    (kept, relations)
}
