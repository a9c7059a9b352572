//! Value-set analysis for multithreaded programs.
//!
//! Registers and stack slots get flow-sensitive value sets at every
//! instruction, propagated along the ICFG. Global and heap a-locs get a
//! single flow-insensitive summary shared by the whole program, so a value
//! stored by one thread is visible to loads in every other thread no matter
//! how they interleave.

pub mod domain;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use domain::{ALoc, Bounded, StackSlot, ValueSet, SET_BOUND};

use crate::ir::{EdgeKind, Icfg, Op, Operand, Pc, Program, Register};
use crate::points::{AccessKind, TracePoint};

/// Register and stack a-locs at one program point.
pub type LocalState = BTreeMap<ALoc, ValueSet>;

/// Flow-insensitive summaries.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SharedSummary {
    /// Global and heap a-locs.
    pub mem: BTreeMap<ALoc, ValueSet>,
    /// Stores through a TopGlobal address.
    pub wild_global: ValueSet,
    /// Stores through a TopHeap address.
    pub wild_heap: ValueSet,
    /// Stores into stack slots through a pointer other than `fp`.
    pub stack_escaped: BTreeMap<StackSlot, ValueSet>,
    /// Every store into each stack slot, by any route.
    pub stack_all: BTreeMap<StackSlot, ValueSet>,
    /// Stores through a TopStack address.
    pub stack_wild: ValueSet,
}

impl SharedSummary {
    fn update(map: &mut BTreeMap<ALoc, ValueSet>, k: ALoc, v: &ValueSet) {
        if v.is_bottom() {
            return;
        }
        map.entry(k).or_default().union_with(v);
    }

    fn update_slot(map: &mut BTreeMap<StackSlot, ValueSet>, k: &StackSlot, v: &ValueSet) {
        if v.is_bottom() {
            return;
        }
        map.entry(k.clone()).or_default().union_with(v);
    }

    /// Every value set any shared location may hold.
    pub fn all_values(&self) -> impl Iterator<Item = &ValueSet> {
        self.mem
            .values()
            .chain([&self.wild_global, &self.wild_heap, &self.stack_wild])
            .chain(self.stack_escaped.values())
    }

    /// Whether `aloc` is stored anywhere in shared memory.
    pub fn holds(&self, aloc: &ALoc) -> bool {
        self.all_values().any(|v| match aloc {
            ALoc::Heap(s) => v.heap.contains(s),
            ALoc::Global(a) => v.global.contains(a),
            ALoc::Stack(s) => v.stack.contains(s),
            ALoc::Reg(_) => false,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WorklistOrder {
    Fifo,
    /// Pop a pseudo-random pending node each step.
    Shuffled(u64),
}

/// Fixpoint of the analysis.
#[derive(Clone, Debug)]
pub struct VsaResult {
    pcs: Vec<Pc>,
    index: BTreeMap<Pc, usize>,
    local_in: Vec<Option<LocalState>>,
    local_out: Vec<Option<LocalState>>,
    pub shared: SharedSummary,
    pub iterations: usize,
}

/// Addresses an operand touches, and whether it is fp-relative.
struct Addresses {
    set: ValueSet,
    via_fp: bool,
}

struct Ctx<'a> {
    p: &'a Program,
    func: &'a str,
}

impl Ctx<'_> {
    fn reg(&self, st: &LocalState, r: Register) -> ValueSet {
        match r {
            Register::Fp => ValueSet::stack(StackSlot::new(self.func, 0)),
            Register::Sp => ValueSet::bottom(),
            r => st.get(&ALoc::Reg(r)).cloned().unwrap_or_default(),
        }
    }

    fn imm(&self, v: i64) -> ValueSet {
        if v >= 0 && self.p.global_containing(v as u64).is_some() {
            ValueSet::global(v as u64)
        } else {
            ValueSet::constant(v)
        }
    }

    fn addresses(&self, st: &LocalState, o: &Operand) -> Addresses {
        match *o {
            Operand::Abs(a) => Addresses {
                set: ValueSet::global(a),
                via_fp: false,
            },
            Operand::Mem { base, disp } => {
                let mut set = self.reg(st, base).shifted(disp);
                set.consts = Bounded::default();
                Addresses {
                    set,
                    via_fp: base == Register::Fp,
                }
            }
            _ => unreachable!("not a memory operand"),
        }
    }

    fn load(&self, st: &LocalState, sh: &SharedSummary, a: &Addresses) -> ValueSet {
        let mut out = ValueSet::bottom();
        match &a.set.global {
            Bounded::Set(gs) => {
                for g in gs {
                    if let Some(v) = sh.mem.get(&ALoc::Global(*g)) {
                        out.union_with(v);
                    }
                }
            }
            Bounded::Top => {
                for (k, v) in &sh.mem {
                    if matches!(k, ALoc::Global(_)) {
                        out.union_with(v);
                    }
                }
            }
        }
        if !a.set.global.is_empty() {
            out.union_with(&sh.wild_global);
        }
        match &a.set.heap {
            Bounded::Set(hs) => {
                for h in hs {
                    if let Some(v) = sh.mem.get(&ALoc::Heap(h.clone())) {
                        out.union_with(v);
                    }
                }
            }
            Bounded::Top => {
                for (k, v) in &sh.mem {
                    if matches!(k, ALoc::Heap(_)) {
                        out.union_with(v);
                    }
                }
            }
        }
        if !a.set.heap.is_empty() {
            out.union_with(&sh.wild_heap);
        }
        if a.via_fp {
            if let Bounded::Set(slots) = &a.set.stack {
                for s in slots {
                    if let Some(v) = st.get(&ALoc::Stack(s.clone())) {
                        out.union_with(v);
                    }
                    if let Some(v) = sh.stack_escaped.get(s) {
                        out.union_with(v);
                    }
                }
            }
            out.union_with(&sh.stack_wild);
        } else if !a.set.stack.is_empty() {
            match &a.set.stack {
                Bounded::Set(slots) => {
                    for s in slots {
                        if let Some(v) = sh.stack_all.get(s) {
                            out.union_with(v);
                        }
                    }
                }
                Bounded::Top => {
                    for v in sh.stack_all.values() {
                        out.union_with(v);
                    }
                }
            }
            out.union_with(&sh.stack_wild);
        }
        out
    }

    fn store(&self, out: &mut LocalState, sh: &mut SharedSummary, a: &Addresses, v: &ValueSet) {
        match &a.set.global {
            Bounded::Set(gs) => {
                for g in gs {
                    SharedSummary::update(&mut sh.mem, ALoc::Global(*g), v);
                }
            }
            Bounded::Top => {
                sh.wild_global.union_with(v);
            }
        }
        match &a.set.heap {
            Bounded::Set(hs) => {
                for h in hs {
                    SharedSummary::update(&mut sh.mem, ALoc::Heap(h.clone()), v);
                }
            }
            Bounded::Top => {
                sh.wild_heap.union_with(v);
            }
        }
        match &a.set.stack {
            Bounded::Set(slots) => {
                for s in slots {
                    SharedSummary::update_slot(&mut sh.stack_all, s, v);
                    let key = ALoc::Stack(s.clone());
                    if a.via_fp {
                        if v.is_bottom() {
                            out.remove(&key);
                        } else {
                            out.insert(key, v.clone());
                        }
                    } else {
                        SharedSummary::update_slot(&mut sh.stack_escaped, s, v);
                        if s.func == self.func && !v.is_bottom() {
                            out.entry(key).or_default().union_with(v);
                        }
                    }
                }
            }
            Bounded::Top => {
                sh.stack_wild.union_with(v);
            }
        }
    }

    fn eval(&self, st: &LocalState, sh: &SharedSummary, o: &Operand) -> ValueSet {
        match *o {
            Operand::Imm(v) => self.imm(v),
            Operand::Reg(r) => self.reg(st, r),
            Operand::Mem { .. } | Operand::Abs(_) => self.load(st, sh, &self.addresses(st, o)),
        }
    }

    fn set_reg(out: &mut LocalState, r: Register, v: ValueSet) {
        if !r.is_general() {
            return;
        }
        if v.is_bottom() {
            out.remove(&ALoc::Reg(r));
        } else {
            out.insert(ALoc::Reg(r), v);
        }
    }

    /// Transfer function: out-state of `op` from its in-state. Stores
    /// update the shared summary in place.
    fn transfer(&self, op: &Op, input: &LocalState, sh: &mut SharedSummary) -> LocalState {
        let mut out = input.clone();
        match op {
            Op::Mov { dst, src } => {
                let v = self.eval(input, sh, src);
                match dst {
                    Operand::Reg(r) => Self::set_reg(&mut out, *r, v),
                    Operand::Mem { .. } | Operand::Abs(_) => {
                        let a = self.addresses(input, dst);
                        self.store(&mut out, sh, &a, &v);
                    }
                    Operand::Imm(_) => {}
                }
            }
            Op::Add { dst, src } | Op::Sub { dst, src } => {
                if dst.is_general() {
                    let lhs = self.reg(input, *dst);
                    let rhs = self.eval(input, sh, src);
                    let v = if matches!(op, Op::Add { .. }) {
                        lhs.add(&rhs)
                    } else {
                        lhs.sub(&rhs)
                    };
                    Self::set_reg(&mut out, *dst, v);
                }
            }
            Op::Alloc { dst, site, .. } => Self::set_reg(&mut out, *dst, ValueSet::heap(site)),
            Op::Spawn { dst, .. } => Self::set_reg(&mut out, *dst, ValueSet::any_const()),
            Op::Cmp { .. }
            | Op::Jmp { .. }
            | Op::Je { .. }
            | Op::Jne { .. }
            | Op::Call { .. }
            | Op::Ret
            | Op::Lock { .. }
            | Op::Unlock { .. }
            | Op::Join { .. }
            | Op::Ptwrite { .. }
            | Op::Halt => {}
        }
        out
    }
}

fn join_into(acc: &mut LocalState, other: &LocalState) {
    for (k, v) in other {
        acc.entry(k.clone()).or_default().union_with(v);
    }
}

fn reads_memory(op: &Op) -> bool {
    matches!(op.memory_access(), Some((_, false)))
}

struct Engine<'a> {
    p: &'a Program,
    icfg: &'a Icfg,
    res: VsaResult,
}

impl Engine<'_> {
    fn ctx(&self, pc: Pc) -> Ctx<'_> {
        Ctx {
            p: self.p,
            func: &self.p.functions[pc.func].name,
        }
    }

    /// In-state of `pc` from its predecessors' out-states; `None` if unreached.
    fn input(&self, pc: Pc) -> Option<LocalState> {
        let mut acc: Option<LocalState> = None;
        let mut add = |s: &LocalState| match &mut acc {
            Some(a) => join_into(a, s),
            None => acc = Some(s.clone()),
        };
        if pc == Pc::new(self.p.entry_index(), 0) {
            add(&LocalState::new());
        }
        for e in self.icfg.preds(pc) {
            let Some(out) = &self.res.local_out[self.icfg.index(e.from)] else {
                continue;
            };
            match e.kind {
                EdgeKind::Fallthrough | EdgeKind::Branch => add(out),
                EdgeKind::Call => {
                    // The callee's frame is fresh; only registers carry over.
                    let regs: LocalState = out
                        .iter()
                        .filter(|(k, _)| matches!(k, ALoc::Reg(_)))
                        .map(|(k, v)| (k.clone(), v.clone()))
                        .collect();
                    add(&regs);
                }
                EdgeKind::Spawn => add(&LocalState::new()),
                EdgeKind::Return => {
                    let call_site = Pc::new(pc.func, pc.idx - 1);
                    let Some(at_call) = &self.res.local_out[self.icfg.index(call_site)] else {
                        continue;
                    };
                    // Registers come back from the callee, this frame's
                    // stack slots are as they were at the call.
                    let mut s: LocalState = out
                        .iter()
                        .filter(|(k, _)| matches!(k, ALoc::Reg(_)))
                        .map(|(k, v)| (k.clone(), v.clone()))
                        .collect();
                    for (k, v) in at_call {
                        if matches!(k, ALoc::Stack(_)) {
                            s.insert(k.clone(), v.clone());
                        }
                    }
                    add(&s);
                }
            }
        }
        acc
    }

    /// One transfer step at `pc`; returns (out changed, shared changed).
    fn step(&mut self, pc: Pc) -> (bool, bool) {
        let Some(input) = self.input(pc) else {
            return (false, false);
        };
        let i = self.icfg.index(pc);
        let mut shared = self.res.shared.clone();
        let out = self.ctx(pc).transfer(self.p.op(pc), &input, &mut shared);
        let shared_changed = shared != self.res.shared;
        self.res.shared = shared;
        self.res.local_in[i] = Some(input);
        let out_changed = self.res.local_out[i].as_ref() != Some(&out);
        if out_changed {
            self.res.local_out[i] = Some(out);
        }
        (out_changed, shared_changed)
    }
}

/// Runs the analysis with FIFO worklist order.
pub fn analyze(icfg: &Icfg, p: &Program) -> VsaResult {
    analyze_with(icfg, p, WorklistOrder::Fifo)
}

pub fn analyze_with(icfg: &Icfg, p: &Program, order: WorklistOrder) -> VsaResult {
    let pcs: Vec<Pc> = icfg.nodes().to_vec();
    let n = pcs.len();
    let index = pcs.iter().enumerate().map(|(i, pc)| (*pc, i)).collect();
    let mut eng = Engine {
        p,
        icfg,
        res: VsaResult {
            pcs,
            index,
            local_in: vec![None; n],
            local_out: vec![None; n],
            shared: SharedSummary::default(),
            iterations: 0,
        },
    };
    let loads: Vec<Pc> = p.pcs().filter(|pc| reads_memory(p.op(*pc))).collect();
    let mut queue: VecDeque<Pc> = VecDeque::new();
    let mut queued = vec![false; n];
    let mut rng = match order {
        WorklistOrder::Shuffled(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        WorklistOrder::Fifo => None,
    };
    let push = |q: &mut VecDeque<Pc>, queued: &mut Vec<bool>, pc: Pc| {
        let i = icfg.index(pc);
        if !queued[i] {
            queued[i] = true;
            q.push_back(pc);
        }
    };
    push(&mut queue, &mut queued, Pc::new(p.entry_index(), 0));
    loop {
        let next = match rng.as_mut() {
            Some(r) if !queue.is_empty() => {
                let k = r.gen_range(0..queue.len());
                queue.swap_remove_back(k)
            }
            _ => queue.pop_front(),
        };
        let Some(pc) = next else { break };
        queued[icfg.index(pc)] = false;
        eng.res.iterations += 1;
        let (out_changed, shared_changed) = eng.step(pc);
        let first_visit = eng.res.local_out[icfg.index(pc)].is_some() && out_changed;
        if out_changed || first_visit {
            for e in icfg.succs(pc) {
                push(&mut queue, &mut queued, e.to);
            }
            if matches!(p.op(pc), Op::Call { .. }) {
                push(&mut queue, &mut queued, Pc::new(pc.func, pc.idx + 1));
            }
        }
        if shared_changed {
            for l in &loads {
                if eng.res.local_in[icfg.index(*l)].is_some() {
                    push(&mut queue, &mut queued, *l);
                }
            }
        }
    }
    eng.res
}

impl VsaResult {
    fn slot(&self, pc: Pc) -> usize {
        self.index[&pc]
    }

    /// `localValueSet[i]`: register and stack a-locs after executing `pc`.
    pub fn local_value_set(&self, pc: Pc) -> Option<&LocalState> {
        self.local_out[self.slot(pc)].as_ref()
    }

    /// Register and stack a-locs before executing `pc`.
    pub fn local_before(&self, pc: Pc) -> Option<&LocalState> {
        self.local_in[self.slot(pc)].as_ref()
    }

    pub fn is_reached(&self, pc: Pc) -> bool {
        self.local_in[self.slot(pc)].is_some()
    }

    /// Value set of `r` just before `pc` executes.
    pub fn reg_before(&self, p: &Program, pc: Pc, r: Register) -> ValueSet {
        match self.local_before(pc) {
            Some(st) => Ctx {
                p,
                func: &p.functions[pc.func].name,
            }
            .reg(st, r),
            None => ValueSet::bottom(),
        }
    }

    /// Value set of an operand's value just before `pc` executes
    /// (the lock address for Lock/Unlock, the handle for Join).
    pub fn operand_before(&self, p: &Program, pc: Pc, o: &Operand) -> ValueSet {
        let Some(st) = self.local_before(pc) else {
            return ValueSet::bottom();
        };
        Ctx {
            p,
            func: &p.functions[pc.func].name,
        }
        .eval(st, &self.shared, o)
    }

    /// A-locs the memory operand of `pc` may touch (base set shifted by the
    /// displacement). `None` if the instruction has no memory operand.
    pub fn access_set(&self, p: &Program, pc: Pc) -> Option<ValueSet> {
        let (o, _) = p.op(pc).memory_access()?;
        let empty = LocalState::new();
        let st = self.local_before(pc).unwrap_or(&empty);
        Some(
            Ctx {
                p,
                func: &p.functions[pc.func].name,
            }
            .addresses(st, &o)
            .set,
        )
    }

    /// Whether another transfer step anywhere would change the result.
    pub fn is_fixpoint(&self, icfg: &Icfg, p: &Program) -> bool {
        let mut eng = Engine {
            p,
            icfg,
            res: self.clone(),
        };
        for pc in icfg.nodes() {
            let before_in = eng.res.local_in[icfg.index(*pc)].clone();
            let (out_changed, shared_changed) = eng.step(*pc);
            if out_changed || shared_changed || eng.res.local_in[icfg.index(*pc)] != before_in {
                return false;
            }
        }
        true
    }

    /// Loose upper bound on worklist pops for a monotone run.
    pub fn iteration_bound(&self, icfg: &Icfg) -> usize {
        let height = 4 * (SET_BOUND + 2);
        let locals: BTreeSet<&ALoc> = self.local_out.iter().flatten().flat_map(|s| s.keys()).collect();
        let shared = self.shared.mem.len() + self.shared.stack_all.len() + self.shared.stack_escaped.len() + 3;
        let lattice = (locals.len() + shared + 1) * height;
        // each pop of a node is caused by a strict increase somewhere
        // (its predecessor's out-state or the shared summary), plus the initial visit
        icfg.len() * (1 + icfg.len() * lattice)
    }

    pub fn dump(&self, p: &Program) -> VsaDump {
        let mut local = BTreeMap::new();
        let mut local_in = BTreeMap::new();
        for (i, pc) in self.pcs.iter().enumerate() {
            let id = p.id_at(*pc).to_string();
            if let Some(s) = &self.local_out[i] {
                local.insert(id.clone(), s.iter().map(|(k, v)| (k.to_string(), v.clone())).collect());
            }
            if let Some(s) = &self.local_in[i] {
                local_in.insert(id, s.iter().map(|(k, v)| (k.to_string(), v.clone())).collect());
            }
        }
        VsaDump {
            local,
            local_in,
            shared: self
                .shared
                .mem
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
            wild_global: self.shared.wild_global.clone(),
            wild_heap: self.shared.wild_heap.clone(),
            stack_escaped: self
                .shared
                .stack_escaped
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
            iterations: self.iterations,
        }
    }
}

/// JSON dump of a [`VsaResult`].
#[derive(Clone, Debug, Serialize)]
pub struct VsaDump {
    pub local: BTreeMap<String, BTreeMap<String, ValueSet>>,
    pub local_in: BTreeMap<String, BTreeMap<String, ValueSet>>,
    pub shared: BTreeMap<String, ValueSet>,
    pub wild_global: ValueSet,
    pub wild_heap: ValueSet,
    pub stack_escaped: BTreeMap<String, ValueSet>,
    pub iterations: usize,
}

/// `T_shared`: memory accesses whose address may be global or heap, plus
/// every synchronization operation.
pub fn find_shared_trace_points(res: &VsaResult, p: &Program) -> BTreeSet<TracePoint> {
    let mut out = BTreeSet::new();
    for pc in p.pcs() {
        if !res.is_reached(pc) {
            continue;
        }
        let op = p.op(pc);
        let instr = p.id_at(pc);
        if let Some((o, is_write)) = op.memory_access() {
            let register = match o {
                Operand::Mem { base, .. } => Some(base),
                _ => None,
            };
            let set = res.access_set(p, pc).expect("memory op");
            if set.is_shared() {
                out.insert(TracePoint {
                    instr,
                    register,
                    access: if is_write { AccessKind::Write } else { AccessKind::Read },
                });
            }
            continue;
        }
        let (access, operand) = match op {
            Op::Lock { lock } => (AccessKind::LockAcq, Some(lock)),
            Op::Unlock { lock } => (AccessKind::LockRel, Some(lock)),
            Op::Join { handle } => (AccessKind::ThreadJoin, Some(handle)),
            Op::Spawn { .. } => (AccessKind::ThreadFork, None),
            _ => continue,
        };
        let register = match operand {
            Some(Operand::Reg(r)) => Some(*r),
            _ => None,
        };
        out.insert(TracePoint {
            instr,
            register,
            access,
        });
    }
    out
}
