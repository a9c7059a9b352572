//! Offline race detection over decoded event sequences.
//!
//! [`detect_hb`] is a vector-clock happens-before detector. A FastTrack
//! style per-address state answers the common "no race" case in constant
//! time; once an address has raced (or the fast check fails) the detector
//! falls back to a history of the latest access per (thread, instruction,
//! kind) so that every racing instruction pair is reported, not only the
//! first one per address. [`detect_lockset`] is an independent Eraser
//! detector.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{EventKind, MemoryEvent};
use crate::ir::InstrId;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorClock(Vec<u64>);

impl VectorClock {
    pub fn new() -> Self {
        VectorClock(Vec::new())
    }

    pub fn get(&self, tid: u32) -> u64 {
        self.0.get(tid as usize).copied().unwrap_or(0)
    }

    pub fn set(&mut self, tid: u32, v: u64) {
        let i = tid as usize;
        if self.0.len() <= i {
            self.0.resize(i + 1, 0);
        }
        self.0[i] = v;
    }

    pub fn increment(&mut self, tid: u32) {
        let v = self.get(tid) + 1;
        self.set(tid, v);
    }

    pub fn join(&mut self, other: &VectorClock) {
        if self.0.len() < other.0.len() {
            self.0.resize(other.0.len(), 0);
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a = (*a).max(*b);
        }
    }

    /// Pointwise `self ≤ other`.
    pub fn leq(&self, other: &VectorClock) -> bool {
        self.0.iter().enumerate().all(|(i, v)| *v <= other.get(i as u32))
    }

    /// Canonical form (trailing zeros dropped), for equality checks.
    pub fn normalized(&self) -> Vec<u64> {
        let mut v = self.0.clone();
        while v.last() == Some(&0) {
            v.pop();
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Epoch {
    pub tid: u32,
    pub clock: u64,
}

impl Epoch {
    fn before(&self, c: &VectorClock) -> bool {
        self.clock <= c.get(self.tid)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReadState {
    Epoch(Option<Epoch>),
    Shared(VectorClock),
}

/// Per-address detector state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VarState {
    pub write: Option<Epoch>,
    pub read: ReadState,
    /// Candidate lockset for the Eraser detector; `None` is the universal set.
    pub lockset: Option<BTreeSet<u64>>,
}

impl Default for VarState {
    fn default() -> Self {
        VarState {
            write: None,
            read: ReadState::Epoch(None),
            lockset: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Detector {
    HappensBefore,
    Lockset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessType {
    Read,
    Write,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Access {
    pub tid: u32,
    pub origin: InstrId,
    pub kind: AccessType,
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RaceReport {
    pub address: u64,
    pub first: Access,
    pub second: Access,
    pub detector: Detector,
}

/// Deduplication key: address plus the unordered instruction pair.
pub type RaceKey = (u64, InstrId, InstrId);

impl RaceReport {
    pub fn key(&self) -> RaceKey {
        let (a, b) = (self.first.origin.clone(), self.second.origin.clone());
        if a <= b {
            (self.address, a, b)
        } else {
            (self.address, b, a)
        }
    }
}

pub fn race_keys(reports: &[RaceReport]) -> BTreeSet<RaceKey> {
    reports.iter().map(RaceReport::key).collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DetectError {
    #[error("thread {tid}: timestamp {timestamp} is earlier than its previous event at {previous}")]
    Order { tid: u32, timestamp: u64, previous: u64 },
    #[error("memory event without an origin instruction at timestamp {0}")]
    MissingOrigin(u64),
}

fn check_order(last: &mut HashMap<u32, u64>, e: &MemoryEvent) -> Result<(), DetectError> {
    if let Some(&prev) = last.get(&e.tid) {
        if e.timestamp < prev {
            return Err(DetectError::Order {
                tid: e.tid,
                timestamp: e.timestamp,
                previous: prev,
            });
        }
    }
    last.insert(e.tid, e.timestamp);
    Ok(())
}

fn access_of(e: &MemoryEvent) -> Result<Access, DetectError> {
    Ok(Access {
        tid: e.tid,
        origin: e.origin.clone().ok_or(DetectError::MissingOrigin(e.timestamp))?,
        kind: if e.kind == EventKind::Write {
            AccessType::Write
        } else {
            AccessType::Read
        },
        timestamp: e.timestamp,
    })
}

/// Happens-before clock state: one clock per thread and per lock.
#[derive(Clone, Debug, Default)]
pub struct ClockState {
    threads: HashMap<u32, VectorClock>,
    locks: HashMap<u64, VectorClock>,
}

impl ClockState {
    /// Current clock of `tid` (a fresh thread starts at 1 in its own slot).
    pub fn clock(&mut self, tid: u32) -> VectorClock {
        self.thread(tid).clone()
    }

    pub fn lock_clock(&self, lock: u64) -> Option<&VectorClock> {
        self.locks.get(&lock)
    }

    fn thread(&mut self, tid: u32) -> &mut VectorClock {
        self.threads.entry(tid).or_insert_with(|| {
            let mut c = VectorClock::new();
            c.set(tid, 1);
            c
        })
    }

    /// Applies a synchronization event; memory events leave clocks alone.
    pub fn sync(&mut self, e: &MemoryEvent) {
        let t = e.tid;
        match e.kind {
            EventKind::LockAcq => {
                let l = self.locks.get(&e.address).cloned().unwrap_or_default();
                self.thread(t).join(&l);
            }
            EventKind::LockRel => {
                let c = self.thread(t).clone();
                self.locks.insert(e.address, c);
                self.thread(t).increment(t);
            }
            EventKind::Fork { child } => {
                let mut c = self.thread(t).clone();
                c.increment(child);
                let own = self.thread(child).get(child).max(c.get(child));
                c.set(child, own);
                self.threads.insert(child, c);
                self.thread(t).increment(t);
            }
            EventKind::Join { child } => {
                let c = self.thread(child).clone();
                self.thread(t).join(&c);
                self.thread(child).increment(child);
            }
            EventKind::Gap => {
                // Forget what this thread knew about others: nothing before
                // the gap can be claimed to happen before what follows.
                let own = self.thread(t).get(t) + 1;
                let mut c = VectorClock::new();
                c.set(t, own);
                self.threads.insert(t, c);
            }
            EventKind::Read | EventKind::Write => {}
        }
    }
}

struct HistoryEntry {
    epoch: Epoch,
    access: Access,
}

/// Vector-clock happens-before detection; reports every unordered
/// conflicting (address, instruction pair) once, in detection order.
pub fn detect_hb(events: &[MemoryEvent]) -> Result<Vec<RaceReport>, DetectError> {
    let mut clocks = ClockState::default();
    let mut last_ts = HashMap::new();
    let mut vars: HashMap<u64, VarState> = HashMap::new();
    let mut raced: BTreeSet<u64> = BTreeSet::new();
    // address -> (tid, origin, is_write) -> latest access
    let mut history: HashMap<u64, BTreeMap<(u32, InstrId, bool), HistoryEntry>> = HashMap::new();
    let mut seen: BTreeSet<RaceKey> = BTreeSet::new();
    let mut reports = Vec::new();

    for e in events {
        check_order(&mut last_ts, e)?;
        if !e.kind.is_memory() {
            clocks.sync(e);
            continue;
        }
        let t = e.tid;
        let c = clocks.thread(t).clone();
        let epoch = Epoch {
            tid: t,
            clock: c.get(t),
        };
        let is_write = e.kind == EventKind::Write;
        let access = access_of(e)?;
        let var = vars.entry(e.address).or_default();

        let fast_ok = !raced.contains(&e.address) && {
            let write_ok = var.write.is_none_or(|w| w.before(&c));
            let read_ok = !is_write
                || match &var.read {
                    ReadState::Epoch(r) => r.is_none_or(|r| r.before(&c)),
                    ReadState::Shared(vc) => vc.leq(&c),
                };
            write_ok && read_ok
        };
        // FastTrack state update.
        if is_write {
            var.write = Some(epoch);
            var.read = ReadState::Epoch(None);
        } else {
            var.read = match std::mem::replace(&mut var.read, ReadState::Epoch(None)) {
                ReadState::Epoch(None) => ReadState::Epoch(Some(epoch)),
                ReadState::Epoch(Some(r)) if r.tid == t || r.before(&c) => ReadState::Epoch(Some(epoch)),
                ReadState::Epoch(Some(r)) => {
                    let mut vc = VectorClock::new();
                    vc.set(r.tid, r.clock);
                    vc.set(t, epoch.clock);
                    ReadState::Shared(vc)
                }
                ReadState::Shared(mut vc) => {
                    vc.set(t, epoch.clock);
                    ReadState::Shared(vc)
                }
            };
        }

        let hist = history.entry(e.address).or_default();
        if !fast_ok {
            for ((u, _, w), h) in hist.iter() {
                if *u == t || !(is_write || *w) || h.epoch.before(&c) {
                    continue;
                }
                raced.insert(e.address);
                let r = RaceReport {
                    address: e.address,
                    first: h.access.clone(),
                    second: access.clone(),
                    detector: Detector::HappensBefore,
                };
                if seen.insert(r.key()) {
                    reports.push(r);
                }
            }
        }
        hist.insert((t, access.origin.clone(), is_write), HistoryEntry { epoch, access });
    }
    Ok(reports)
}

/// Latest read and latest write of one thread to one address.
type LatestPair = (Option<Access>, Option<Access>);

#[derive(Clone, Debug, PartialEq, Eq)]
enum EraserState {
    Virgin,
    Exclusive(u32),
    Shared,
    SharedModified,
}

/// Eraser lockset discipline check.
pub fn detect_lockset(events: &[MemoryEvent]) -> Result<Vec<RaceReport>, DetectError> {
    let mut last_ts = HashMap::new();
    let mut held: HashMap<u32, BTreeSet<u64>> = HashMap::new();
    let mut vars: HashMap<u64, (EraserState, VarState)> = HashMap::new();
    // address -> tid -> (latest read, latest write)
    let mut recent: HashMap<u64, BTreeMap<u32, LatestPair>> = HashMap::new();
    let mut seen: BTreeSet<RaceKey> = BTreeSet::new();
    let mut reports = Vec::new();

    for e in events {
        check_order(&mut last_ts, e)?;
        match e.kind {
            EventKind::LockAcq => {
                held.entry(e.tid).or_default().insert(e.address);
                continue;
            }
            EventKind::LockRel => {
                held.entry(e.tid).or_default().remove(&e.address);
                continue;
            }
            EventKind::Read | EventKind::Write => {}
            _ => continue,
        }
        let t = e.tid;
        let is_write = e.kind == EventKind::Write;
        let access = access_of(e)?;
        let locks = held.get(&t).cloned().unwrap_or_default();
        let (state, var) = vars
            .entry(e.address)
            .or_insert_with(|| (EraserState::Virgin, VarState::default()));
        let refine = |var: &mut VarState| {
            var.lockset = Some(match var.lockset.take() {
                None => locks.clone(),
                Some(c) => c.intersection(&locks).copied().collect(),
            });
        };
        *state = match std::mem::replace(state, EraserState::Virgin) {
            EraserState::Virgin => EraserState::Exclusive(t),
            EraserState::Exclusive(o) if o == t => EraserState::Exclusive(o),
            EraserState::Exclusive(_) | EraserState::Shared => {
                refine(var);
                if is_write {
                    EraserState::SharedModified
                } else {
                    EraserState::Shared
                }
            }
            EraserState::SharedModified => {
                refine(var);
                EraserState::SharedModified
            }
        };
        let by_thread = recent.entry(e.address).or_default();
        if *state == EraserState::SharedModified && var.lockset.as_ref().is_some_and(|c| c.is_empty()) {
            // Pair with the latest conflicting access of another thread.
            let other = by_thread
                .iter()
                .filter(|(u, _)| **u != t)
                .flat_map(|(_, (r, w))| {
                    let r = if is_write { r.as_ref() } else { None };
                    [r, w.as_ref()]
                })
                .flatten()
                .max_by_key(|a| (a.timestamp, a.tid));
            if let Some(first) = other {
                let r = RaceReport {
                    address: e.address,
                    first: first.clone(),
                    second: access.clone(),
                    detector: Detector::Lockset,
                };
                if seen.insert(r.key()) {
                    reports.push(r);
                }
            }
        }
        let slot = by_thread.entry(t).or_default();
        if is_write {
            slot.1 = Some(access);
        } else {
            slot.0 = Some(access);
        }
    }
    Ok(reports)
}
