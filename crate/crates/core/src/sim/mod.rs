//! Deterministic multithreaded interpreter with simulated PTWRITE tracing.
//!
//! One global loop executes one instruction per step on a pseudo-randomly
//! chosen virtual CPU. A ptwrite is executed together with the instruction
//! it precedes, and only the latter counts toward scheduling, so a program
//! and its instrumented variants see exactly the same interleaving for the
//! same seed.

pub mod format;

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{InstrId, Op, Operand, Pc, Program, Register};
use crate::points::AccessKind;

pub const HEAP_BASE: u64 = 0x1000_0000_0000;
pub const STACK_BASE: u64 = 0x7000_0000_0000;
pub const STACK_SPAN: u64 = 0x10_0000;
pub const FRAME_SIZE: u64 = 0x1000;
/// `sideband` tid for "no thread".
pub const NO_THREAD: u32 = u32::MAX;
const MAX_CALL_DEPTH: usize = 200;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub cpus: u32,
    /// Instructions per scheduling slice.
    pub quantum: u32,
    pub cycles_per_instr: u64,
    /// PTW packets each CPU may emit per drain window; `None` is unlimited.
    pub buffer_capacity: Option<u64>,
    /// Length of a drain window in cycles.
    pub drain_interval: u64,
    /// PTW packets between periodic TSC packets; 0 disables re-emission.
    pub tsc_interval: u64,
    pub max_steps: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            cpus: 2,
            quantum: 4,
            cycles_per_instr: 3,
            buffer_capacity: None,
            drain_interval: 3000,
            tsc_interval: 32,
            max_steps: 1_000_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Packet {
    Tsc { tsc: u64 },
    Cyc { elapsed: u64 },
    Ptw { payload: u64, id: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidebandRecord {
    pub timestamp: u64,
    pub cpu: u32,
    pub tid_out: u32,
    pub tid_in: u32,
}

/// Concrete memory region of an address, in a-loc terms.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "region", rename_all = "snake_case")]
pub enum Region {
    Global { addr: u64 },
    Stack { func: String, offset: i64 },
    Heap { site: String, offset: u64 },
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtEntry {
    pub ts: u64,
    pub cpu: u32,
    pub tid: u32,
    pub instr: InstrId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub access: Option<AccessKind>,
    /// Memory address, lock address, or (for fork and join) 0.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub address: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
    /// Value of the memory operand's base register (or the ptwrite payload).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_value: Option<u64>,
    /// Value loaded or stored.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<u64>,
    /// Child thread of a fork or join.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub child: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossWindow {
    pub cpu: u32,
    pub start: u64,
    pub end: u64,
    pub dropped: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub config: SimConfig,
    pub streams: Vec<Vec<Packet>>,
    pub sideband: Vec<SidebandRecord>,
    pub ground_truth: Vec<GtEntry>,
    pub loss_log: Vec<LossWindow>,
    pub final_memory: BTreeMap<u64, u64>,
    pub threads: u32,
    pub steps: u64,
    pub emitted_ptw: u64,
    pub dropped_ptw: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub loss_percent: f64,
    pub loss_times: u64,
}

pub fn loss_stats(a: &RunArtifacts) -> LossStats {
    let total = a.emitted_ptw + a.dropped_ptw;
    LossStats {
        loss_percent: if total == 0 {
            0.0
        } else {
            a.dropped_ptw as f64 * 100.0 / total as f64
        },
        loss_times: a.loss_log.len() as u64,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("deadlock: blocked threads {}", fmt_blocked(.blocked))]
    Deadlock { blocked: Vec<(u32, InstrId)> },
    #[error("step limit of {0} reached")]
    StepLimit(u64),
    #[error("thread {tid} at {at}: {msg}")]
    Runtime { tid: u32, at: InstrId, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

fn fmt_blocked(b: &[(u32, InstrId)]) -> String {
    b.iter()
        .map(|(t, i)| format!("T{t}@{i}"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Clone, Debug)]
struct Frame {
    func: usize,
    ret: Option<Pc>,
    fp: u64,
}

#[derive(Clone, Debug)]
struct Thread {
    pc: Pc,
    regs: [u64; 8],
    eq: bool,
    frames: Vec<Frame>,
    done: bool,
    cpu: u32,
}

struct CpuState {
    current: Option<u32>,
    slice_left: u32,
    last_packet_ts: u64,
    ptw_since_tsc: u64,
    window: u64,
    window_count: u64,
}

struct Heap {
    next: u64,
    blocks: Vec<(u64, u64, String)>,
}

struct Machine<'a> {
    p: &'a Program,
    cfg: &'a SimConfig,
    now: u64,
    mem: HashMap<u64, u64>,
    heap: Heap,
    threads: Vec<Thread>,
    locks: HashMap<u64, u32>,
    cpus: Vec<CpuState>,
    rng: ChaCha8Rng,
    out: RunArtifacts,
    loss_index: HashMap<(u32, u64), usize>,
}

fn stack_top(tid: u32) -> u64 {
    STACK_BASE + (tid as u64 + 1) * STACK_SPAN
}

fn frame_fp(tid: u32, depth: usize) -> u64 {
    stack_top(tid) - depth as u64 * FRAME_SIZE - FRAME_SIZE / 2
}

impl<'a> Machine<'a> {
    fn new(p: &'a Program, cfg: &'a SimConfig) -> Self {
        let cpus = (0..cfg.cpus)
            .map(|_| CpuState {
                current: None,
                slice_left: 0,
                last_packet_ts: 0,
                ptw_since_tsc: 0,
                window: 0,
                window_count: 0,
            })
            .collect();
        let mut m = Machine {
            p,
            cfg,
            now: 0,
            mem: HashMap::new(),
            heap: Heap {
                next: HEAP_BASE,
                blocks: Vec::new(),
            },
            threads: Vec::new(),
            locks: HashMap::new(),
            cpus,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            out: RunArtifacts {
                config: cfg.clone(),
                streams: vec![vec![Packet::Tsc { tsc: 0 }]; cfg.cpus as usize],
                sideband: Vec::new(),
                ground_truth: Vec::new(),
                loss_log: Vec::new(),
                final_memory: BTreeMap::new(),
                threads: 0,
                steps: 0,
                emitted_ptw: 0,
                dropped_ptw: 0,
            },
            loss_index: HashMap::new(),
        };
        m.spawn_thread(p.entry_index());
        m
    }

    fn spawn_thread(&mut self, func: usize) -> u32 {
        let tid = self.threads.len() as u32;
        self.threads.push(Thread {
            pc: Pc::new(func, 0),
            regs: [0; 8],
            eq: false,
            frames: vec![Frame {
                func,
                ret: None,
                fp: frame_fp(tid, 0),
            }],
            done: false,
            cpu: tid % self.cfg.cpus,
        });
        tid
    }

    fn region(&self, addr: u64) -> Region {
        if self.p.global_containing(addr).is_some() {
            return Region::Global { addr };
        }
        if addr >= HEAP_BASE && addr < self.heap.next {
            let i = self.heap.blocks.partition_point(|b| b.0 <= addr);
            if i > 0 {
                let (start, size, site) = &self.heap.blocks[i - 1];
                if addr - start < *size {
                    return Region::Heap {
                        site: site.clone(),
                        offset: addr - start,
                    };
                }
            }
            return Region::Unknown;
        }
        if addr >= STACK_BASE {
            let tid = ((addr - STACK_BASE) / STACK_SPAN) as usize;
            if let Some(t) = self.threads.get(tid) {
                for f in &t.frames {
                    let off = addr.wrapping_sub(f.fp) as i64;
                    if off.unsigned_abs() < FRAME_SIZE / 2 || off == -((FRAME_SIZE / 2) as i64) {
                        return Region::Stack {
                            func: self.p.functions[f.func].name.clone(),
                            offset: off,
                        };
                    }
                }
            }
        }
        Region::Unknown
    }

    fn reg(&self, tid: u32, r: Register) -> u64 {
        let t = &self.threads[tid as usize];
        match r {
            Register::Fp => t.frames.last().expect("live thread has a frame").fp,
            Register::Sp => t.frames.last().expect("live thread has a frame").fp - FRAME_SIZE / 2,
            r => t.regs[r.index().expect("general register")],
        }
    }

    fn set_reg(&mut self, tid: u32, r: Register, v: u64) {
        if let Some(i) = r.index() {
            self.threads[tid as usize].regs[i] = v;
        }
    }

    fn address(&self, tid: u32, o: &Operand) -> u64 {
        match *o {
            Operand::Mem { base, disp } => self.reg(tid, base).wrapping_add(disp as u64),
            Operand::Abs(a) => a,
            _ => unreachable!("not a memory operand"),
        }
    }

    fn value(&self, tid: u32, o: &Operand) -> u64 {
        match *o {
            Operand::Imm(v) => v as u64,
            Operand::Reg(r) => self.reg(tid, r),
            Operand::Mem { .. } | Operand::Abs(_) => self.mem.get(&self.address(tid, o)).copied().unwrap_or(0),
        }
    }

    /// First non-ptwrite instruction at or after `pc`.
    fn origin_of(&self, mut pc: Pc) -> Pc {
        while self.p.op(pc).is_ptwrite() {
            pc.idx += 1;
        }
        pc
    }

    fn runnable(&self, tid: u32) -> bool {
        let t = &self.threads[tid as usize];
        if t.done {
            return false;
        }
        match self.p.op(self.origin_of(t.pc)) {
            Op::Lock { lock } => !self.locks.contains_key(&self.value(tid, lock)),
            Op::Join { handle } => {
                let h = self.value(tid, handle);
                match self.threads.get(h as usize) {
                    Some(c) => c.done,
                    // invalid handle: let it run and fail loudly
                    None => true,
                }
            }
            _ => true,
        }
    }

    fn err(&self, tid: u32, pc: Pc, msg: impl Into<String>) -> SimError {
        SimError::Runtime {
            tid,
            at: self.p.id_at(pc),
            msg: msg.into(),
        }
    }

    fn emit_ptw(&mut self, cpu: u32, payload: u64, id: u32) {
        let ts = self.now;
        let cfg = self.cfg;
        let c = &mut self.cpus[cpu as usize];
        let window = ts / cfg.drain_interval;
        if window != c.window {
            c.window = window;
            c.window_count = 0;
        }
        if let Some(cap) = cfg.buffer_capacity {
            if c.window_count >= cap {
                self.out.dropped_ptw += 1;
                let idx = *self.loss_index.entry((cpu, window)).or_insert_with(|| {
                    self.out.loss_log.push(LossWindow {
                        cpu,
                        start: window * cfg.drain_interval,
                        end: (window + 1) * cfg.drain_interval,
                        dropped: 0,
                    });
                    self.out.loss_log.len() - 1
                });
                self.out.loss_log[idx].dropped += 1;
                return;
            }
        }
        c.window_count += 1;
        let stream = &mut self.out.streams[cpu as usize];
        if cfg.tsc_interval > 0 && c.ptw_since_tsc >= cfg.tsc_interval {
            stream.push(Packet::Tsc { tsc: ts });
            c.last_packet_ts = ts;
            c.ptw_since_tsc = 0;
        }
        let elapsed = ts - c.last_packet_ts;
        if elapsed > 0 {
            stream.push(Packet::Cyc { elapsed });
        }
        stream.push(Packet::Ptw { payload, id });
        c.last_packet_ts = ts;
        c.ptw_since_tsc += 1;
        self.out.emitted_ptw += 1;
    }

    fn gt(&mut self, cpu: u32, tid: u32, pc: Pc) -> GtEntry {
        GtEntry {
            ts: self.now,
            cpu,
            tid,
            instr: self.p.id_at(pc),
            access: None,
            address: None,
            region: None,
            base_value: None,
            value: None,
            child: None,
        }
    }

    /// Executes one instruction of `tid` (ptwrites are handled by the caller).
    fn exec(&mut self, cpu: u32, tid: u32) -> Result<(), SimError> {
        let pc = self.threads[tid as usize].pc;
        let op = self.p.op(pc).clone();
        let mut g = self.gt(cpu, tid, pc);
        let mut next = Some(Pc::new(pc.func, pc.idx + 1));
        if let Some((o, is_write)) = op.memory_access() {
            let addr = self.address(tid, &o);
            g.access = Some(if is_write { AccessKind::Write } else { AccessKind::Read });
            g.address = Some(addr);
            g.region = Some(self.region(addr));
            if let Operand::Mem { base, .. } = o {
                g.base_value = Some(self.reg(tid, base));
            }
        }
        match &op {
            Op::Mov { dst, src } => {
                let v = self.value(tid, src);
                match dst {
                    Operand::Reg(r) => self.set_reg(tid, *r, v),
                    _ => {
                        let a = self.address(tid, dst);
                        self.mem.insert(a, v);
                    }
                }
                g.value = if op.memory_access().is_some() { Some(v) } else { None };
            }
            Op::Add { dst, src } | Op::Sub { dst, src } => {
                let a = self.reg(tid, *dst);
                let b = self.value(tid, src);
                if src.is_memory() {
                    g.value = Some(b);
                }
                let v = if matches!(op, Op::Add { .. }) {
                    a.wrapping_add(b)
                } else {
                    a.wrapping_sub(b)
                };
                self.set_reg(tid, *dst, v);
            }
            Op::Cmp { a, b } => {
                let x = self.value(tid, a);
                let y = self.value(tid, b);
                if a.is_memory() {
                    g.value = Some(x);
                } else if b.is_memory() {
                    g.value = Some(y);
                }
                self.threads[tid as usize].eq = x == y;
            }
            Op::Jmp { target } => next = Some(Pc::new(pc.func, self.p.resolve_label(pc.func, target))),
            Op::Je { target } | Op::Jne { target } => {
                let eq = self.threads[tid as usize].eq;
                if eq == matches!(op, Op::Je { .. }) {
                    next = Some(Pc::new(pc.func, self.p.resolve_label(pc.func, target)));
                }
            }
            Op::Call { func } => {
                let callee = self.p.func_index(func).expect("validated");
                let t = &mut self.threads[tid as usize];
                if t.frames.len() >= MAX_CALL_DEPTH {
                    return Err(self.err(tid, pc, "call depth limit exceeded"));
                }
                let depth = t.frames.len();
                t.frames.push(Frame {
                    func: callee,
                    ret: Some(Pc::new(pc.func, pc.idx + 1)),
                    fp: frame_fp(tid, depth),
                });
                next = Some(Pc::new(callee, 0));
            }
            Op::Ret => {
                let t = &mut self.threads[tid as usize];
                let f = t.frames.pop().expect("live thread has a frame");
                next = f.ret;
            }
            Op::Halt => next = None,
            Op::Alloc { dst, site, size } => {
                let addr = self.heap.next;
                let size = (*size).max(8);
                self.heap.blocks.push((addr, size, site.clone()));
                self.heap.next = addr + size.div_ceil(16) * 16 + 16;
                self.set_reg(tid, *dst, addr);
            }
            Op::Lock { lock } => {
                let a = self.value(tid, lock);
                if let Some(owner) = self.locks.get(&a) {
                    return Err(self.err(tid, pc, format!("lock {a:#x} already held by T{owner}")));
                }
                self.locks.insert(a, tid);
                g.access = Some(AccessKind::LockAcq);
                g.address = Some(a);
            }
            Op::Unlock { lock } => {
                let a = self.value(tid, lock);
                if self.locks.get(&a) != Some(&tid) {
                    return Err(self.err(tid, pc, format!("unlock of {a:#x} not held")));
                }
                self.locks.remove(&a);
                g.access = Some(AccessKind::LockRel);
                g.address = Some(a);
            }
            Op::Spawn { func, dst } => {
                let f = self.p.func_index(func).expect("validated");
                let child = self.spawn_thread(f);
                self.set_reg(tid, *dst, child as u64);
                g.access = Some(AccessKind::ThreadFork);
                g.child = Some(child);
                g.address = Some(0);
            }
            Op::Join { handle } => {
                let h = self.value(tid, handle);
                match self.threads.get(h as usize) {
                    Some(c) if c.done && h != tid as u64 => {}
                    _ => return Err(self.err(tid, pc, format!("join on invalid handle {h}"))),
                }
                g.access = Some(AccessKind::ThreadJoin);
                g.child = Some(h as u32);
                g.address = Some(0);
            }
            Op::Ptwrite { .. } => unreachable!("ptwrites run with their origin"),
        }
        self.out.ground_truth.push(g);
        let t = &mut self.threads[tid as usize];
        match next {
            Some(n) => t.pc = n,
            None => t.done = true,
        }
        self.now += self.cfg.cycles_per_instr;
        Ok(())
    }

    /// Runs `tid`'s pending ptwrites and then its next instruction.
    fn step_thread(&mut self, cpu: u32, tid: u32) -> Result<(), SimError> {
        loop {
            let pc = self.threads[tid as usize].pc;
            let Op::Ptwrite { src, id } = *self.p.op(pc) else {
                break;
            };
            let payload = src.map_or(0, |r| self.reg(tid, r));
            self.emit_ptw(cpu, payload, id);
            let mut g = self.gt(cpu, tid, pc);
            g.base_value = Some(payload);
            self.out.ground_truth.push(g);
            self.threads[tid as usize].pc.idx += 1;
            self.now += self.cfg.cycles_per_instr;
        }
        self.exec(cpu, tid)
    }

    fn run(mut self) -> Result<RunArtifacts, SimError> {
        loop {
            let live = self.threads.iter().any(|t| !t.done);
            if !live {
                break;
            }
            if self.out.steps >= self.cfg.max_steps {
                return Err(SimError::StepLimit(self.cfg.max_steps));
            }
            let runnable: Vec<u32> = (0..self.threads.len() as u32).filter(|t| self.runnable(*t)).collect();
            if runnable.is_empty() {
                let blocked = self
                    .threads
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| !t.done)
                    .map(|(i, t)| (i as u32, self.p.id_at(self.origin_of(t.pc))))
                    .collect();
                return Err(SimError::Deadlock { blocked });
            }
            let mut cpus: Vec<u32> = runnable.iter().map(|t| self.threads[*t as usize].cpu).collect();
            cpus.sort_unstable();
            cpus.dedup();
            let cpu = cpus[self.rng.gen_range(0..cpus.len())];
            let c = &self.cpus[cpu as usize];
            let keep = match c.current {
                Some(t) if c.slice_left > 0 => runnable.contains(&t),
                _ => false,
            };
            let tid = if keep {
                c.current.expect("checked")
            } else {
                let mine: Vec<u32> = runnable
                    .iter()
                    .copied()
                    .filter(|t| self.threads[*t as usize].cpu == cpu)
                    .collect();
                let pick = mine[self.rng.gen_range(0..mine.len())];
                let c = &mut self.cpus[cpu as usize];
                c.slice_left = self.cfg.quantum;
                if c.current != Some(pick) {
                    self.out.sideband.push(SidebandRecord {
                        timestamp: self.now,
                        cpu,
                        tid_out: c.current.unwrap_or(NO_THREAD),
                        tid_in: pick,
                    });
                    c.current = Some(pick);
                }
                pick
            };
            self.cpus[cpu as usize].slice_left -= 1;
            self.step_thread(cpu, tid)?;
            self.out.steps += 1;
        }
        let mut out = self.out;
        out.final_memory = self.mem.into_iter().collect();
        out.threads = self.threads.len() as u32;
        Ok(out)
    }
}

/// Executes `p` from `main` on thread 0.
pub fn run(p: &Program, cfg: &SimConfig) -> Result<RunArtifacts, SimError> {
    if cfg.cpus == 0 || cfg.quantum == 0 || cfg.cycles_per_instr == 0 || cfg.drain_interval == 0 {
        return Err(SimError::Config(
            "cpus, quantum, cycles_per_instr and drain_interval must be positive".into(),
        ));
    }
    Machine::new(p, cfg).run()
}
