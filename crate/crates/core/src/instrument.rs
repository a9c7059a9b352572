//! Ptwrite insertion and the ptwrite-to-origin mapping table.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{ptwrite_label, Function, Icfg, InstrId, Instruction, Op, Operand, Pc, Program, Register};
use crate::points::{AccessKind, TracePoint};
use crate::selector::{select_naive, DerivedRelation, SelectionReport};
use crate::vsa::VsaResult;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InstrumentError {
    #[error("trace point {0} does not name an instruction of the program")]
    MissingInstruction(InstrId),
    #[error("trace point {0} does not match its instruction")]
    Mismatch(InstrId),
    #[error("program already contains ptwrite instructions")]
    AlreadyInstrumented,
    #[error("derived point {0} is unreachable from its source")]
    Unreachable(InstrId),
    #[error("instrumented program failed validation: {0}")]
    Invalid(String),
}

/// How to rebuild an eliminated access from its source's recorded value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedEntry {
    pub origin: InstrId,
    pub register: Register,
    pub access: AccessKind,
    pub delta: i64,
    pub disp: i64,
    /// Fewest instructions executed from the source origin to this one.
    pub distance: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub ptw_id: u32,
    pub origin: InstrId,
    pub register: Option<Register>,
    pub access: AccessKind,
    /// Added to the recorded register value to form the address.
    pub disp: i64,
    /// Address known statically (absolute operands, immediate lock operands).
    pub constant: Option<u64>,
    pub derived: Vec<DerivedEntry>,
}

impl MappingEntry {
    /// Effective address for a recorded payload, if the event has one.
    pub fn address(&self, payload: u64) -> Option<u64> {
        match (self.constant, self.register) {
            (Some(c), _) => Some(c),
            (None, Some(_)) => Some(payload.wrapping_add(self.disp as u64)),
            (None, None) => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingTable {
    pub entries: Vec<MappingEntry>,
    pub relations: BTreeSet<DerivedRelation>,
}

impl MappingTable {
    pub fn get(&self, ptw_id: u32) -> Option<&MappingEntry> {
        self.entries.get(ptw_id as usize).filter(|e| e.ptw_id == ptw_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<MappingTable> {
        serde_json::from_str(s)
    }
}

/// Register and displacement recorded for a point, or a constant address.
fn describe(op: &Op, t: &TracePoint) -> Option<(Option<Register>, i64, Option<u64>)> {
    let operand = match (op, t.access) {
        (_, AccessKind::Read | AccessKind::Write) => {
            let (o, is_write) = op.memory_access()?;
            if is_write != (t.access == AccessKind::Write) {
                return None;
            }
            o
        }
        (Op::Lock { lock }, AccessKind::LockAcq) | (Op::Unlock { lock }, AccessKind::LockRel) => *lock,
        (Op::Join { handle }, AccessKind::ThreadJoin) => *handle,
        (Op::Spawn { .. }, AccessKind::ThreadFork) => return Some((None, 0, None)),
        _ => return None,
    };
    let got = match operand {
        Operand::Mem { base, disp } => (Some(base), disp, None),
        Operand::Abs(a) => (None, 0, Some(a)),
        Operand::Reg(r) => (Some(r), 0, None),
        Operand::Imm(v) => (None, 0, Some(v as u64)),
    };
    (got.0 == t.register).then_some(got)
}

fn memory_disp(op: &Op) -> i64 {
    match op.memory_access() {
        Some((Operand::Mem { disp, .. }, _)) => disp,
        _ => 0,
    }
}

/// Shortest intra-procedural path length (in executed instructions) from `from` to `to`.
fn distance(icfg: &Icfg, from: Pc, to: Pc) -> Option<u64> {
    let mut seen = BTreeMap::from([(from, 0u64)]);
    let mut q = VecDeque::from([from]);
    while let Some(pc) = q.pop_front() {
        let d = seen[&pc];
        for s in icfg.intra_succs(pc) {
            if *s == to {
                return Some(d + 1);
            }
            if !seen.contains_key(s) {
                seen.insert(*s, d + 1);
                q.push_back(*s);
            }
        }
    }
    None
}

/// Inserts a ptwrite before every point of `sel.t_trace`.
pub fn instrument(p: &Program, sel: &SelectionReport) -> Result<(Program, MappingTable), InstrumentError> {
    if p.ptwrite_count() > 0 {
        return Err(InstrumentError::AlreadyInstrumented);
    }
    let mut at: BTreeMap<Pc, &TracePoint> = BTreeMap::new();
    for t in &sel.t_trace {
        let pc = p
            .pc_of(&t.instr)
            .ok_or_else(|| InstrumentError::MissingInstruction(t.instr.clone()))?;
        if at.insert(pc, t).is_some() {
            return Err(InstrumentError::Mismatch(t.instr.clone()));
        }
    }

    let mut entries = Vec::with_capacity(at.len());
    let mut functions = Vec::with_capacity(p.functions.len());
    for (fi, f) in p.functions.iter().enumerate() {
        let mut instrs = Vec::with_capacity(f.instrs.len());
        for (ii, ins) in f.instrs.iter().enumerate() {
            if let Some(t) = at.get(&Pc::new(fi, ii)) {
                let (register, disp, constant) =
                    describe(&ins.op, t).ok_or_else(|| InstrumentError::Mismatch(t.instr.clone()))?;
                let id = entries.len() as u32;
                instrs.push(Instruction {
                    label: ptwrite_label(id),
                    op: Op::Ptwrite { src: register, id },
                });
                entries.push(MappingEntry {
                    ptw_id: id,
                    origin: t.instr.clone(),
                    register,
                    access: t.access,
                    disp,
                    constant,
                    derived: Vec::new(),
                });
            }
            instrs.push(ins.clone());
        }
        functions.push(Function {
            name: f.name.clone(),
            instrs,
        });
    }
    let out = Program::new(p.globals.clone(), functions).map_err(|(_, e)| InstrumentError::Invalid(e.to_string()))?;

    let icfg = Icfg::build(&out);
    let by_origin: BTreeMap<InstrId, usize> = entries.iter().enumerate().map(|(i, e)| (e.origin.clone(), i)).collect();
    for r in &sel.relations {
        let &ei = by_origin
            .get(&r.source.instr)
            .ok_or_else(|| InstrumentError::MissingInstruction(r.source.instr.clone()))?;
        let src_pc = out.pc_of(&r.source.instr).expect("source exists");
        let dst_pc = out
            .pc_of(&r.derived.instr)
            .ok_or_else(|| InstrumentError::MissingInstruction(r.derived.instr.clone()))?;
        let register = r
            .derived
            .register
            .ok_or_else(|| InstrumentError::Mismatch(r.derived.instr.clone()))?;
        let distance =
            distance(&icfg, src_pc, dst_pc).ok_or_else(|| InstrumentError::Unreachable(r.derived.instr.clone()))?;
        entries[ei].derived.push(DerivedEntry {
            origin: r.derived.instr.clone(),
            register,
            access: r.derived.access,
            delta: r.delta,
            disp: memory_disp(out.op(dst_pc)),
            distance,
        });
    }
    for e in &mut entries {
        e.derived
            .sort_by(|a, b| (a.distance, &a.origin).cmp(&(b.distance, &b.origin)));
    }
    Ok((
        out,
        MappingTable {
            entries,
            relations: sel.relations.clone(),
        },
    ))
}

/// Baseline: every shared point recorded, nothing pruned or derived.
pub fn instrument_naive(p: &Program, res: &VsaResult) -> Result<(Program, MappingTable), InstrumentError> {
    instrument(p, &select_naive(p, res))
}
