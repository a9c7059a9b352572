//! Selective trace-point instrumentation and offline data race detection.
//!
//! The pipeline runs in three stages: static analysis picks the memory
//! instructions whose base registers must be recorded ([`vsa`],
//! [`selector`], [`instrument`]); a deterministic simulator executes the
//! instrumented program and emits per-CPU trace packets ([`sim`]); offline,
//! the packets are decoded into per-thread event sequences and checked for
//! races ([`decode`], [`detect`]). [`pipeline`] wires the stages together.

pub mod corpus;
pub mod decode;
pub mod detect;
pub mod instrument;
pub mod ir;
pub mod pipeline;
pub mod points;
pub mod selector;
pub mod sim;
pub mod vsa;
