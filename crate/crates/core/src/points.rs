use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ir::{InstrId, Register};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Write,
    LockAcq,
    LockRel,
    ThreadFork,
    ThreadJoin,
}

impl AccessKind {
    pub fn is_memory(self) -> bool {
        matches!(self, AccessKind::Read | AccessKind::Write)
    }
}

/// An (instruction, register, access kind) triple selected for recording.
///
/// `register` is `None` when the address is a constant (absolute memory
/// operands, immediate lock operands, spawn sites).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TracePoint {
    pub instr: InstrId,
    pub register: Option<Register>,
    pub access: AccessKind,
}

impl fmt::Display for TracePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.register {
            Some(r) => write!(f, "{r}@{} ({:?})", self.instr, self.access),
            None => write!(f, "#@{} ({:?})", self.instr, self.access),
        }
    }
}
