//! Named fixture programs and a seeded generator of random multithreaded
//! programs mixing lock-guarded, owned-heap, stack-only, derived-register
//! and unguarded shared access patterns.

use std::fmt::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FIXTURES: &[(&str, &str)] = &[
    ("two_writers", include_str!("../fixtures/two_writers.asm")),
    ("lock_guarded", include_str!("../fixtures/lock_guarded.asm")),
    ("owned_heap", include_str!("../fixtures/owned_heap.asm")),
    ("stack_locals", include_str!("../fixtures/stack_locals.asm")),
    ("derived_fields", include_str!("../fixtures/derived_fields.asm")),
    ("fully_unguarded", include_str!("../fixtures/fully_unguarded.asm")),
    ("stress", include_str!("../fixtures/stress.asm")),
];

pub fn fixture(name: &str) -> Option<&'static str> {
    FIXTURES.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

const COUNTERS: [u64; 4] = [4096, 4104, 4112, 4120];
const LOCKS: [u64; 2] = [8192, 8200];
/// Holds the pointer to the object shared by all workers.
const SHARED_PTR: u64 = 4160;

#[derive(Clone, Copy, Debug)]
enum Block {
    Guarded { lock: usize, counter: usize },
    Nested { counter: usize },
    Unguarded { counter: usize, write: bool },
    Owned { site: usize },
    Stack,
    SharedFields { first: u8, second: u8, write: bool },
    CallHelper { helper: usize },
}

fn random_block(rng: &mut ChaCha8Rng, helpers: usize) -> Block {
    match rng.gen_range(0..if helpers > 0 { 8 } else { 7 }) {
        0 | 1 => Block::Guarded {
            lock: rng.gen_range(0..LOCKS.len()),
            counter: rng.gen_range(0..COUNTERS.len()),
        },
        2 => Block::Nested {
            counter: rng.gen_range(0..COUNTERS.len()),
        },
        3 => Block::Unguarded {
            counter: rng.gen_range(0..COUNTERS.len()),
            write: rng.gen_bool(0.5),
        },
        4 => Block::Owned {
            site: rng.gen_range(0..3),
        },
        5 => Block::Stack,
        6 => {
            let first = rng.gen_range(0..4u8);
            Block::SharedFields {
                first,
                second: (first + rng.gen_range(1..4u8)) % 4,
                write: rng.gen_bool(0.5),
            }
        }
        _ => Block::CallHelper {
            helper: rng.gen_range(0..helpers),
        },
    }
}

/// Emits a block; uses r0-r5 only so r7 can count loop iterations.
fn emit(out: &mut String, b: Block) {
    let mut line = |s: String| {
        out.push_str("    ");
        out.push_str(&s);
        out.push('\n');
    };
    match b {
        Block::Guarded { lock, counter } => {
            let (l, c) = (LOCKS[lock], COUNTERS[counter]);
            line(format!("lock g{l}"));
            line(format!("mov r0, [g{c}]"));
            line("add r0, 1".into());
            line(format!("mov [g{c}], r0"));
            line(format!("unlock g{l}"));
        }
        Block::Nested { counter } => {
            let c = COUNTERS[counter];
            line(format!("lock g{}", LOCKS[0]));
            line(format!("lock g{}", LOCKS[1]));
            line(format!("mov r0, [g{c}]"));
            line("add r0, 2".into());
            line(format!("mov [g{c}], r0"));
            line(format!("unlock g{}", LOCKS[1]));
            line(format!("unlock g{}", LOCKS[0]));
        }
        Block::Unguarded { counter, write } => {
            let c = COUNTERS[counter];
            if write {
                line(format!("mov [g{c}], 5"));
            } else {
                line(format!("mov r0, [g{c}]"));
            }
        }
        Block::Owned { site } => {
            line(format!("alloc r4, @obj{site}, 32"));
            line("mov [r4+0], 1".into());
            line("mov [r4+8], 2".into());
            line("mov r5, [r4+0]".into());
            line("mov [r4+16], r5".into());
        }
        Block::Stack => {
            line("mov [fp-8], 3".into());
            line("mov r5, [fp-8]".into());
            line("mov r2, fp".into());
            line("mov [r2-16], r5".into());
        }
        Block::SharedFields { first, second, write } => {
            line(format!("mov r1, [g{SHARED_PTR}]"));
            line(format!("mov r3, [r1+{}]", first * 8));
            if write {
                line(format!("mov [r1+{}], r3", second * 8));
            } else {
                line(format!("mov r3, [r1+{}]", second * 8));
            }
        }
        Block::CallHelper { helper } => line(format!("call helper{helper}")),
    }
}

/// Generates one program text from `seed`. Programs are deadlock free
/// (locks nest only in a fixed order) and terminate.
pub fn generate(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let workers = rng.gen_range(2..=3);
    let helpers = rng.gen_range(0..=2);
    let mut out = String::new();
    for c in COUNTERS {
        writeln!(out, "global g{c} size 8").unwrap();
    }
    writeln!(out, "global g{SHARED_PTR} size 8").unwrap();
    for l in LOCKS {
        writeln!(out, "global g{l} size 8").unwrap();
    }

    out.push_str("fn main {\n");
    out.push_str("    alloc r0, @shared, 32\n");
    out.push_str("    mov [r0+0], 0\n");
    writeln!(out, "    mov [g{SHARED_PTR}], r0").unwrap();
    let handles = ["r5", "r6", "r7"];
    let kinds: Vec<usize> = (0..workers).map(|_| rng.gen_range(0..2)).collect();
    for (w, h) in handles.iter().enumerate().take(workers) {
        writeln!(out, "    spawn worker{}, {h}", kinds[w]).unwrap();
    }
    if rng.gen_bool(0.5) {
        // Blocks that touch r2, r4 or r5 would clobber a thread handle.
        let b = loop {
            let b = random_block(&mut rng, 0);
            if !matches!(b, Block::Owned { .. } | Block::Stack) {
                break b;
            }
        };
        emit(&mut out, b);
    }
    let mut joins: Vec<&str> = handles[..workers].to_vec();
    joins.shuffle(&mut rng);
    for h in joins {
        writeln!(out, "    join {h}").unwrap();
    }
    emit(
        &mut out,
        Block::Unguarded {
            counter: rng.gen_range(0..COUNTERS.len()),
            write: false,
        },
    );
    out.push_str("    halt\n}\n");

    for k in 0..2 {
        writeln!(out, "fn worker{k} {{").unwrap();
        let blocks = rng.gen_range(2..=5);
        let looped = rng.gen_bool(0.4);
        if looped {
            writeln!(out, "    mov r7, {}", rng.gen_range(2..=4)).unwrap();
            out.push_str("body:\n");
        }
        for _ in 0..blocks {
            emit(&mut out, random_block(&mut rng, helpers));
        }
        if looped {
            out.push_str("    sub r7, 1\n    cmp r7, 0\n    jne body\n");
        }
        out.push_str("    ret\n}\n");
    }
    for h in 0..helpers {
        writeln!(out, "fn helper{h} {{").unwrap();
        for _ in 0..rng.gen_range(1..=2) {
            emit(&mut out, random_block(&mut rng, 0));
        }
        out.push_str("    ret\n}\n");
    }
    out
}

/// `n` generated programs named `gen000`, `gen001`, ...
pub fn generated_corpus(n: usize, base_seed: u64) -> Vec<(String, String)> {
    (0..n)
        .map(|i| (format!("gen{i:03}"), generate(base_seed.wrapping_add(i as u64))))
        .collect()
}

/// The fixtures followed by `n` generated programs.
pub fn full_corpus(n: usize, base_seed: u64) -> Vec<(String, String)> {
    FIXTURES
        .iter()
        .map(|(n, s)| (n.to_string(), s.to_string()))
        .chain(generated_corpus(n, base_seed))
        .collect()
}
