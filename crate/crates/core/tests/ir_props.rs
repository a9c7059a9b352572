use proptest::prelude::*;

use ptrace_race::corpus::{full_corpus, generate};
use ptrace_race::ir::{parse_program, EdgeKind, Icfg, Op, Pc, Program};

fn reparse(p: &Program) -> Program {
    parse_program(&p.to_string()).unwrap_or_else(|e| panic!("{e}\n{p}"))
}

#[test]
fn corpus_round_trips() {
    for (name, src) in full_corpus(50, 2024) {
        let p = parse_program(&src).unwrap();
        assert_eq!(reparse(&p), p, "{name}");
    }
}

proptest! {
    #[test]
    fn generated_programs_round_trip(seed in any::<u64>()) {
        let p = parse_program(&generate(seed)).unwrap();
        prop_assert_eq!(reparse(&p), p);
    }
}

#[test]
fn instrumented_programs_round_trip() {
    use ptrace_race::instrument::instrument;
    use ptrace_race::pipeline::{selection, Mode};
    for (name, src) in full_corpus(20, 5) {
        let p = parse_program(&src).unwrap();
        for mode in [Mode::Selective, Mode::Naive] {
            let (q, _) = instrument(&p, &selection(&p, mode)).unwrap();
            assert_eq!(reparse(&q), q, "{name} {mode}");
        }
    }
}

fn expected_intra_succs(op: &Op) -> usize {
    match op {
        Op::Jmp { .. } => 1,
        Op::Je { .. } | Op::Jne { .. } => 2,
        Op::Ret | Op::Halt => 0,
        _ => 1,
    }
}

#[test]
fn successor_counts_match_opcode() {
    for (name, src) in full_corpus(50, 2024) {
        let p = parse_program(&src).unwrap();
        let g = Icfg::build(&p);
        for pc in p.pcs() {
            let op = p.op(pc);
            let last = pc.idx + 1 == p.functions[pc.func].instrs.len();
            let mut want = expected_intra_succs(op);
            if last && want == 1 && op.falls_through() {
                want = 0;
            }
            let mut succ: Vec<Pc> = g.intra_succs(pc).to_vec();
            succ.sort();
            succ.dedup();
            // je/jne to the very next instruction collapse into one edge.
            if matches!(op, Op::Je { .. } | Op::Jne { .. }) && succ.len() == 1 {
                want = 1;
            }
            assert_eq!(succ.len(), want, "{name} {}: {op:?}", p.id_at(pc));
            if let Op::Call { func } = op {
                let callee = p.func_index(func).unwrap();
                assert!(g
                    .succs(pc)
                    .iter()
                    .any(|e| e.kind == EdgeKind::Call && e.to == Pc::new(callee, 0)));
            }
        }
    }
}

#[test]
fn corpus_has_no_unreachable_instructions() {
    for (name, src) in full_corpus(50, 2024) {
        let p = parse_program(&src).unwrap();
        let g = Icfg::build(&p);
        for (f, func) in p.functions.iter().enumerate() {
            let mut seen = vec![false; func.instrs.len()];
            let mut stack = vec![Pc::new(f, 0)];
            while let Some(pc) = stack.pop() {
                if std::mem::replace(&mut seen[pc.idx], true) {
                    continue;
                }
                stack.extend(g.intra_succs(pc).iter().copied());
            }
            let dead: Vec<_> = (0..seen.len()).filter(|i| !seen[*i]).collect();
            assert!(
                dead.is_empty(),
                "{name}: {} has unreachable instructions {dead:?}",
                func.name
            );
        }
    }
}
