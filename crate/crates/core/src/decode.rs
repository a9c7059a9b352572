//! Offline decoding of packet streams into per-thread event sequences.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instrument::MappingTable;
use crate::ir::InstrId;
use crate::points::AccessKind;
use crate::sim::{LossWindow, Packet, SidebandRecord, NO_THREAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    Read,
    Write,
    LockAcq,
    LockRel,
    Fork {
        child: u32,
    },
    Join {
        child: u32,
    },
    /// Records of this thread were lost around here.
    Gap,
}

impl EventKind {
    pub fn is_memory(self) -> bool {
        matches!(self, EventKind::Read | EventKind::Write)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEvent {
    pub tid: u32,
    pub timestamp: u64,
    #[serde(flatten)]
    pub kind: EventKind,
    pub address: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub origin: Option<InstrId>,
    /// Synthesized from a related record rather than recorded.
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub derived: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimedPtw {
    pub cpu: u32,
    /// Index of the PTW packet in its stream.
    pub pos: usize,
    pub timestamp: u64,
    pub payload: u64,
    pub id: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("cpu {cpu}: stream does not start with a TSC packet")]
    NoLeadingTsc { cpu: u32 },
    #[error("cpu {cpu}: sideband timestamps not strictly increasing at {timestamp}")]
    SidebandOrder { cpu: u32, timestamp: u64 },
    #[error("cpu {cpu}: no thread is scheduled at timestamp {timestamp}")]
    Attribution { cpu: u32, timestamp: u64 },
    #[error("unknown ptwrite id {0}")]
    UnknownPtw(u32),
}

/// Timestamps of the PTW packets of one stream: the latest TSC value plus
/// every CYC elapsed since it.
pub fn reconstruct_timestamps(cpu: u32, stream: &[Packet]) -> Result<Vec<TimedPtw>, DecodeError> {
    if !matches!(stream.first(), Some(Packet::Tsc { .. }) | None) {
        return Err(DecodeError::NoLeadingTsc { cpu });
    }
    let mut now = 0u64;
    let mut out = Vec::new();
    for (pos, p) in stream.iter().enumerate() {
        match *p {
            Packet::Tsc { tsc } => now = tsc,
            Packet::Cyc { elapsed } => now += elapsed,
            Packet::Ptw { payload, id } => out.push(TimedPtw {
                cpu,
                pos,
                timestamp: now,
                payload,
                id,
            }),
        }
    }
    Ok(out)
}

/// Per-CPU scheduling intervals from the sideband trace.
pub struct Schedule {
    by_cpu: BTreeMap<u32, Vec<(u64, u32)>>,
}

impl Schedule {
    pub fn new(sideband: &[SidebandRecord]) -> Result<Schedule, DecodeError> {
        let mut by_cpu: BTreeMap<u32, Vec<(u64, u32)>> = BTreeMap::new();
        for r in sideband {
            let v = by_cpu.entry(r.cpu).or_default();
            if v.last().is_some_and(|(t, _)| *t >= r.timestamp) {
                return Err(DecodeError::SidebandOrder {
                    cpu: r.cpu,
                    timestamp: r.timestamp,
                });
            }
            v.push((r.timestamp, r.tid_in));
        }
        Ok(Schedule { by_cpu })
    }

    /// Thread running on `cpu` at `t`; a switch at exactly `t` counts for
    /// the incoming thread.
    pub fn thread_at(&self, cpu: u32, t: u64) -> Option<u32> {
        let v = self.by_cpu.get(&cpu)?;
        let i = v.partition_point(|(s, _)| *s <= t);
        (i > 0).then(|| v[i - 1].1).filter(|tid| *tid != NO_THREAD)
    }

    /// Threads scheduled on `cpu` at any point of `[start, end)`.
    pub fn threads_during(&self, cpu: u32, start: u64, end: u64) -> Vec<u32> {
        let Some(v) = self.by_cpu.get(&cpu) else {
            return Vec::new();
        };
        let mut out: Vec<u32> = Vec::new();
        let first = v.partition_point(|(s, _)| *s <= start);
        let from = first.saturating_sub(1);
        for (s, tid) in &v[from..] {
            if *s >= end {
                break;
            }
            if *tid != NO_THREAD && !out.contains(tid) {
                out.push(*tid);
            }
        }
        out
    }
}

/// Attaches the scheduled thread to each PTW of one CPU.
pub fn attribute_threads(ptws: &[TimedPtw], schedule: &Schedule) -> Result<Vec<(TimedPtw, u32)>, DecodeError> {
    ptws.iter()
        .map(|p| {
            schedule
                .thread_at(p.cpu, p.timestamp)
                .map(|tid| (*p, tid))
                .ok_or(DecodeError::Attribution {
                    cpu: p.cpu,
                    timestamp: p.timestamp,
                })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    pub merged: Vec<MemoryEvent>,
}

impl Decoded {
    pub fn per_thread(&self) -> BTreeMap<u32, Vec<MemoryEvent>> {
        let mut out: BTreeMap<u32, Vec<MemoryEvent>> = BTreeMap::new();
        for e in &self.merged {
            out.entry(e.tid).or_default().push(e.clone());
        }
        out
    }

    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        events_to_json_lines(&self.merged)
    }
}

pub fn events_to_json_lines(events: &[MemoryEvent]) -> String {
    let mut s = String::new();
    for e in events {
        s.push_str(&serde_json::to_string(e).expect("event serializes"));
        s.push('\n');
    }
    s
}

pub fn events_from_json_lines(text: &str) -> serde_json::Result<Vec<MemoryEvent>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// Decodes all streams into one timestamp-ordered event list.
///
/// `cycles_per_instr` must match the run: a recorded access executes one
/// instruction after its ptwrite, and derived accesses are placed
/// `distance` instructions after their source.
pub fn decode(
    streams: &[Vec<Packet>],
    sideband: &[SidebandRecord],
    table: &MappingTable,
    cycles_per_instr: u64,
    loss_log: &[LossWindow],
) -> Result<Decoded, DecodeError> {
    let schedule = Schedule::new(sideband)?;
    // (timestamp, cpu, stream position, sub-index) orders everything.
    let mut keyed: Vec<((u64, u32, usize, usize), MemoryEvent)> = Vec::new();
    for (cpu, stream) in streams.iter().enumerate() {
        let cpu = cpu as u32;
        let ptws = reconstruct_timestamps(cpu, stream)?;
        for (p, tid) in attribute_threads(&ptws, &schedule)? {
            let e = table.get(p.id).ok_or(DecodeError::UnknownPtw(p.id))?;
            let ts = p.timestamp + cycles_per_instr;
            let kind = match e.access {
                AccessKind::Read => EventKind::Read,
                AccessKind::Write => EventKind::Write,
                AccessKind::LockAcq => EventKind::LockAcq,
                AccessKind::LockRel => EventKind::LockRel,
                AccessKind::ThreadJoin => EventKind::Join {
                    child: e.address(p.payload).unwrap_or(p.payload) as u32,
                },
                AccessKind::ThreadFork => EventKind::Fork { child: 0 },
            };
            let address = match kind {
                EventKind::Fork { .. } | EventKind::Join { .. } => 0,
                _ => e.address(p.payload).unwrap_or(0),
            };
            keyed.push((
                (ts, cpu, p.pos, 0),
                MemoryEvent {
                    tid,
                    timestamp: ts,
                    kind,
                    address,
                    origin: Some(e.origin.clone()),
                    derived: false,
                },
            ));
            for (k, d) in e.derived.iter().enumerate() {
                let value = p.payload.wrapping_add(d.delta as u64);
                let dts = ts + d.distance * cycles_per_instr;
                keyed.push((
                    (dts, cpu, p.pos, k + 1),
                    MemoryEvent {
                        tid,
                        timestamp: dts,
                        kind: if d.access == AccessKind::Write {
                            EventKind::Write
                        } else {
                            EventKind::Read
                        },
                        address: value.wrapping_add(d.disp as u64),
                        origin: Some(d.origin.clone()),
                        derived: true,
                    },
                ));
            }
        }
    }
    for w in loss_log {
        for tid in schedule.threads_during(w.cpu, w.start, w.end) {
            keyed.push((
                (w.start, w.cpu, 0, 0),
                MemoryEvent {
                    tid,
                    timestamp: w.start,
                    kind: EventKind::Gap,
                    address: 0,
                    origin: None,
                    derived: false,
                },
            ));
        }
    }
    keyed.sort_by_key(|a| a.0);
    // Thread ids are handed out in spawn order, so the n-th fork creates thread n.
    let mut next_child = 1u32;
    for (_, e) in &mut keyed {
        if let EventKind::Fork { child } = &mut e.kind {
            *child = next_child;
            next_child += 1;
        }
    }
    Ok(Decoded {
        merged: keyed.into_iter().map(|(_, e)| e).collect(),
    })
}
