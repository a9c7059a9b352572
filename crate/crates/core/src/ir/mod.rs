//! Toy multithreaded assembly IR.
//!
//! Programs are a set of functions, each an ordered list of labeled
//! instructions, plus a table of global variables. Every other stage
//! (value-set analysis, selection, instrumentation, simulation) consumes
//! this representation.

mod icfg;
mod parse;
mod print;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use icfg::{Edge, EdgeKind, Icfg};
pub use parse::{parse_program, ParseError, ParseErrorKind};

/// Machine registers. `fp` and `sp` are reserved for stack addressing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Register {
    R0,
    R1,
    R2,
    R3,
    R4,
    R5,
    R6,
    R7,
    Fp,
    Sp,
}

impl Register {
    pub const GENERAL: [Register; 8] = [
        Register::R0,
        Register::R1,
        Register::R2,
        Register::R3,
        Register::R4,
        Register::R5,
        Register::R6,
        Register::R7,
    ];

    pub fn is_general(self) -> bool {
        !matches!(self, Register::Fp | Register::Sp)
    }

    /// Index into a general-purpose register file, `None` for fp/sp.
    pub fn index(self) -> Option<usize> {
        Register::GENERAL.iter().position(|r| *r == self)
    }

    pub fn name(self) -> &'static str {
        match self {
            Register::R0 => "r0",
            Register::R1 => "r1",
            Register::R2 => "r2",
            Register::R3 => "r3",
            Register::R4 => "r4",
            Register::R5 => "r5",
            Register::R6 => "r6",
            Register::R7 => "r7",
            Register::Fp => "fp",
            Register::Sp => "sp",
        }
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Register {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "r0" => Register::R0,
            "r1" => Register::R1,
            "r2" => Register::R2,
            "r3" => Register::R3,
            "r4" => Register::R4,
            "r5" => Register::R5,
            "r6" => Register::R6,
            "r7" => Register::R7,
            "fp" => Register::Fp,
            "sp" => Register::Sp,
            _ => return Err(()),
        })
    }
}

impl Serialize for Register {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Register {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse()
            .map_err(|_| serde::de::Error::custom(format!("unknown register `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operand {
    Imm(i64),
    Reg(Register),
    /// Memory at `base + disp`.
    Mem {
        base: Register,
        disp: i64,
    },
    /// Memory at a fixed global address.
    Abs(u64),
}

impl Operand {
    pub fn is_memory(&self) -> bool {
        matches!(self, Operand::Mem { .. } | Operand::Abs(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum Op {
    Mov { dst: Operand, src: Operand },
    Add { dst: Register, src: Operand },
    Sub { dst: Register, src: Operand },
    Cmp { a: Operand, b: Operand },
    Jmp { target: String },
    Je { target: String },
    Jne { target: String },
    Call { func: String },
    Ret,
    Alloc { dst: Register, site: String, size: u64 },
    Lock { lock: Operand },
    Unlock { lock: Operand },
    Spawn { func: String, dst: Register },
    Join { handle: Operand },
    Ptwrite { src: Option<Register>, id: u32 },
    Halt,
}

impl Op {
    pub fn is_ptwrite(&self) -> bool {
        matches!(self, Op::Ptwrite { .. })
    }

    pub fn is_sync(&self) -> bool {
        matches!(
            self,
            Op::Lock { .. } | Op::Unlock { .. } | Op::Spawn { .. } | Op::Join { .. }
        )
    }

    /// Branch target label, if any.
    pub fn target(&self) -> Option<&str> {
        match self {
            Op::Jmp { target } | Op::Je { target } | Op::Jne { target } => Some(target),
            _ => None,
        }
    }

    /// Whether control can continue to the next instruction in the list.
    pub fn falls_through(&self) -> bool {
        !matches!(self, Op::Jmp { .. } | Op::Ret | Op::Halt)
    }

    /// The single memory operand of this instruction and whether it is written.
    pub fn memory_access(&self) -> Option<(Operand, bool)> {
        match self {
            Op::Mov { dst, src } => {
                if dst.is_memory() {
                    Some((*dst, true))
                } else if src.is_memory() {
                    Some((*src, false))
                } else {
                    None
                }
            }
            Op::Add { src, .. } | Op::Sub { src, .. } if src.is_memory() => Some((*src, false)),
            Op::Cmp { a, b } => {
                if a.is_memory() {
                    Some((*a, false))
                } else if b.is_memory() {
                    Some((*b, false))
                } else {
                    None
                }
            }
            _ => None,
        }
    }

    /// Register written by this instruction, if any.
    pub fn defined_register(&self) -> Option<Register> {
        match self {
            Op::Mov {
                dst: Operand::Reg(r), ..
            } => Some(*r),
            Op::Add { dst, .. } | Op::Sub { dst, .. } => Some(*dst),
            Op::Alloc { dst, .. } | Op::Spawn { dst, .. } => Some(*dst),
            _ => None,
        }
    }
}

/// Globally unique instruction identity: function name plus label.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstrId {
    pub func: String,
    pub label: String,
}

impl InstrId {
    pub fn new(func: impl Into<String>, label: impl Into<String>) -> Self {
        InstrId {
            func: func.into(),
            label: label.into(),
        }
    }
}

impl fmt::Display for InstrId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.func, self.label)
    }
}

impl FromStr for InstrId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (func, label) = s
            .split_once('.')
            .ok_or_else(|| format!("instruction id `{s}` is not of the form func.label"))?;
        Ok(InstrId::new(func, label))
    }
}

impl Serialize for InstrId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InstrId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub const PTW_LABEL_PREFIX: &str = "ptw.";

pub fn ptwrite_label(id: u32) -> String {
    format!("{PTW_LABEL_PREFIX}{id}")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub label: String,
    #[serde(flatten)]
    pub op: Op,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    pub instrs: Vec<Instruction>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Global {
    pub addr: u64,
    pub size: u64,
}

impl Global {
    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.addr && addr - self.addr < self.size
    }
}

/// Position of an instruction: function index and instruction index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pc {
    pub func: usize,
    pub idx: usize,
}

impl Pc {
    pub fn new(func: usize, idx: usize) -> Self {
        Pc { func, idx }
    }
}

/// A validated program. Construct through [`parse_program`] or
/// [`Program::new`]; both run the same validation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Program {
    pub globals: Vec<Global>,
    pub functions: Vec<Function>,
    pub entry: String,
    #[serde(skip)]
    func_index: BTreeMap<String, usize>,
    #[serde(skip)]
    labels: Vec<BTreeMap<String, usize>>,
}

/// Structural validation failures (no source position).
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValidationError {
    #[error("no entry function `main`")]
    NoEntry,
    #[error("duplicate function `{0}`")]
    DuplicateFunction(String),
    #[error("function `{0}` is empty")]
    EmptyFunction(String),
    #[error("duplicate label `{label}` in `{func}`")]
    DuplicateLabel { func: String, label: String },
    #[error("unresolved label `{label}` in `{func}`")]
    UnresolvedLabel { func: String, label: String },
    #[error("unresolved function `{0}`")]
    UnresolvedFunction(String),
    #[error("control falls off the end of `{0}`")]
    FallsOffEnd(String),
    #[error("reserved register misuse at {at}: {detail}")]
    ReservedRegister { at: InstrId, detail: String },
    #[error("malformed instruction at {at}: {detail}")]
    Malformed { at: InstrId, detail: String },
    #[error("overlapping or empty global at g{0}")]
    BadGlobal(u64),
    #[error("absolute address g{addr} at {at} is outside every declared global")]
    UndeclaredGlobal { at: InstrId, addr: u64 },
}

impl Program {
    pub fn new(
        globals: Vec<Global>,
        functions: Vec<Function>,
    ) -> Result<Program, (Option<(usize, usize)>, ValidationError)> {
        let mut p = Program {
            globals,
            functions,
            entry: "main".to_string(),
            func_index: BTreeMap::new(),
            labels: Vec::new(),
        };
        p.globals.sort_by_key(|g| g.addr);
        p.validate()?;
        Ok(p)
    }

    /// Validation; errors carry the (function, instruction) index when local.
    fn validate(&mut self) -> Result<(), (Option<(usize, usize)>, ValidationError)> {
        for w in self.globals.windows(2) {
            if w[0].addr + w[0].size > w[1].addr {
                return Err((None, ValidationError::BadGlobal(w[1].addr)));
            }
        }
        if let Some(g) = self.globals.iter().find(|g| g.size == 0) {
            return Err((None, ValidationError::BadGlobal(g.addr)));
        }
        self.func_index.clear();
        self.labels.clear();
        for (fi, f) in self.functions.iter().enumerate() {
            if self.func_index.insert(f.name.clone(), fi).is_some() {
                return Err((None, ValidationError::DuplicateFunction(f.name.clone())));
            }
            if f.instrs.is_empty() {
                return Err((None, ValidationError::EmptyFunction(f.name.clone())));
            }
            let mut labels = BTreeMap::new();
            for (ii, ins) in f.instrs.iter().enumerate() {
                if labels.insert(ins.label.clone(), ii).is_some() {
                    return Err((
                        Some((fi, ii)),
                        ValidationError::DuplicateLabel {
                            func: f.name.clone(),
                            label: ins.label.clone(),
                        },
                    ));
                }
            }
            self.labels.push(labels);
        }
        if !self.func_index.contains_key(&self.entry) {
            return Err((None, ValidationError::NoEntry));
        }
        for fi in 0..self.functions.len() {
            let f = &self.functions[fi];
            for (ii, ins) in f.instrs.iter().enumerate() {
                let at = || InstrId::new(f.name.clone(), ins.label.clone());
                let loc = Some((fi, ii));
                if let Some(t) = ins.op.target() {
                    if t.starts_with(PTW_LABEL_PREFIX) || !self.labels[fi].contains_key(t) {
                        return Err((
                            loc,
                            ValidationError::UnresolvedLabel {
                                func: f.name.clone(),
                                label: t.to_string(),
                            },
                        ));
                    }
                }
                if let Op::Call { func } | Op::Spawn { func, .. } = &ins.op {
                    if !self.func_index.contains_key(func) {
                        return Err((loc, ValidationError::UnresolvedFunction(func.clone())));
                    }
                }
                self.check_operands(&ins.op).map_err(|e| (loc, e(at())))?;
                if ii + 1 == f.instrs.len() && ins.op.falls_through() {
                    return Err((loc, ValidationError::FallsOffEnd(f.name.clone())));
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn check_operands(&self, op: &Op) -> Result<(), Box<dyn Fn(InstrId) -> ValidationError>> {
        fn reserved(detail: &'static str) -> Box<dyn Fn(InstrId) -> ValidationError> {
            Box::new(move |at| ValidationError::ReservedRegister {
                at,
                detail: detail.to_string(),
            })
        }
        fn malformed(detail: &'static str) -> Box<dyn Fn(InstrId) -> ValidationError> {
            Box::new(move |at| ValidationError::Malformed {
                at,
                detail: detail.to_string(),
            })
        }
        let mut operands: Vec<Operand> = Vec::new();
        match op {
            Op::Mov { dst, src } => {
                if matches!(dst, Operand::Imm(_)) {
                    return Err(malformed("mov destination is an immediate"));
                }
                if dst.is_memory() && src.is_memory() {
                    return Err(malformed("mov with two memory operands"));
                }
                if let Operand::Reg(r) = dst {
                    if !r.is_general() {
                        return Err(reserved("fp/sp written by mov"));
                    }
                }
                operands.extend([*dst, *src]);
            }
            Op::Add { dst, src } | Op::Sub { dst, src } => {
                match dst {
                    Register::Fp => return Err(reserved("fp is read-only")),
                    Register::Sp if !matches!(src, Operand::Imm(_)) => {
                        return Err(reserved("sp arithmetic takes an immediate"))
                    }
                    _ => {}
                }
                operands.push(*src);
            }
            Op::Cmp { a, b } => {
                if a.is_memory() && b.is_memory() {
                    return Err(malformed("cmp with two memory operands"));
                }
                operands.extend([*a, *b]);
            }
            Op::Alloc { dst, size, .. } => {
                if !dst.is_general() {
                    return Err(reserved("alloc into fp/sp"));
                }
                if *size == 0 {
                    return Err(malformed("zero-sized allocation"));
                }
            }
            Op::Spawn { dst, .. } => {
                if !dst.is_general() {
                    return Err(reserved("spawn handle into fp/sp"));
                }
            }
            Op::Lock { lock: o } | Op::Unlock { lock: o } | Op::Join { handle: o } => match o {
                Operand::Imm(_) => {}
                Operand::Reg(r) if r.is_general() => {}
                Operand::Reg(_) => return Err(reserved("fp/sp as sync operand")),
                _ => return Err(malformed("sync operand must be a register or immediate")),
            },
            Op::Ptwrite { src: Some(r), .. } if !r.is_general() => return Err(reserved("ptwrite of fp/sp")),
            _ => {}
        }
        for o in operands {
            match o {
                Operand::Reg(Register::Sp) | Operand::Mem { base: Register::Sp, .. } => {
                    return Err(reserved("sp outside add/sub"))
                }
                Operand::Abs(addr) if self.global_containing(addr).is_none() => {
                    return Err(Box::new(move |at| ValidationError::UndeclaredGlobal { at, addr }));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn entry_index(&self) -> usize {
        self.func_index[&self.entry]
    }

    pub fn func_index(&self, name: &str) -> Option<usize> {
        self.func_index.get(name).copied()
    }

    pub fn instr(&self, pc: Pc) -> &Instruction {
        &self.functions[pc.func].instrs[pc.idx]
    }

    pub fn op(&self, pc: Pc) -> &Op {
        &self.instr(pc).op
    }

    pub fn id_at(&self, pc: Pc) -> InstrId {
        let f = &self.functions[pc.func];
        InstrId::new(f.name.clone(), f.instrs[pc.idx].label.clone())
    }

    pub fn pc_of(&self, id: &InstrId) -> Option<Pc> {
        let fi = self.func_index(&id.func)?;
        let idx = *self.labels[fi].get(&id.label)?;
        Some(Pc::new(fi, idx))
    }

    /// Index a branch to `label` lands on. A ptwrite prefix in front of the
    /// labeled instruction is part of the target.
    pub fn resolve_label(&self, func: usize, label: &str) -> usize {
        let mut idx = self.labels[func][label];
        while idx > 0 && self.functions[func].instrs[idx - 1].op.is_ptwrite() {
            idx -= 1;
        }
        idx
    }

    pub fn pcs(&self) -> impl Iterator<Item = Pc> + '_ {
        self.functions
            .iter()
            .enumerate()
            .flat_map(|(fi, f)| (0..f.instrs.len()).map(move |ii| Pc::new(fi, ii)))
    }

    pub fn global_containing(&self, addr: u64) -> Option<&Global> {
        let i = self.globals.partition_point(|g| g.addr <= addr);
        if i == 0 {
            return None;
        }
        let g = &self.globals[i - 1];
        g.contains(addr).then_some(g)
    }

    pub fn instruction_count(&self) -> usize {
        self.functions.iter().map(|f| f.instrs.len()).sum()
    }

    pub fn ptwrite_count(&self) -> usize {
        self.pcs().filter(|pc| self.op(*pc).is_ptwrite()).count()
    }

    /// Canonical JSON form used by golden tests.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("program serializes")
    }
}

impl<'de> Deserialize<'de> for Program {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            globals: Vec<Global>,
            functions: Vec<Function>,
        }
        let raw = Raw::deserialize(d)?;
        Program::new(raw.globals, raw.functions).map_err(|(_, e)| serde::de::Error::custom(e))
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        print::write_program(self, f)
    }
}
