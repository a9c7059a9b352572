use serde::Serialize;

use super::{Op, Pc, Program};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Fallthrough,
    Branch,
    /// Call site to callee entry.
    Call,
    /// Callee `ret` to the instruction after the call site.
    Return,
    /// Thread creation: spawn site to the spawned function's entry.
    Spawn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Edge {
    pub from: Pc,
    pub to: Pc,
    pub kind: EdgeKind,
}

/// Interprocedural control-flow graph over instruction positions.
///
/// Intra-procedural successors treat a call as falling through to its
/// return site; the interprocedural view replaces that with call/return
/// edges.
#[derive(Clone, Debug)]
pub struct Icfg {
    nodes: Vec<Pc>,
    offsets: Vec<usize>,
    succs: Vec<Vec<Edge>>,
    preds: Vec<Vec<Edge>>,
    intra_succs: Vec<Vec<Pc>>,
    intra_preds: Vec<Vec<Pc>>,
}

impl Icfg {
    pub fn build(p: &Program) -> Icfg {
        let mut offsets = Vec::with_capacity(p.functions.len());
        let mut n = 0;
        for f in &p.functions {
            offsets.push(n);
            n += f.instrs.len();
        }
        let nodes: Vec<Pc> = p.pcs().collect();
        let mut g = Icfg {
            nodes,
            offsets,
            succs: vec![Vec::new(); n],
            preds: vec![Vec::new(); n],
            intra_succs: vec![Vec::new(); n],
            intra_preds: vec![Vec::new(); n],
        };

        // Return sites of each function, in program order.
        let mut return_sites: Vec<Vec<Pc>> = vec![Vec::new(); p.functions.len()];
        for pc in p.pcs() {
            if let Op::Call { func } = p.op(pc) {
                let callee = p.func_index(func).expect("validated");
                return_sites[callee].push(Pc::new(pc.func, pc.idx + 1));
            }
        }

        for pc in p.pcs() {
            let op = p.op(pc);
            let next = Pc::new(pc.func, pc.idx + 1);
            let mut intra = Vec::new();
            let mut edges = Vec::new();
            match op {
                Op::Jmp { target } => {
                    let t = Pc::new(pc.func, p.resolve_label(pc.func, target));
                    intra.push(t);
                    edges.push((t, EdgeKind::Branch));
                }
                Op::Je { target } | Op::Jne { target } => {
                    let t = Pc::new(pc.func, p.resolve_label(pc.func, target));
                    intra.push(next);
                    edges.push((next, EdgeKind::Fallthrough));
                    intra.push(t);
                    edges.push((t, EdgeKind::Branch));
                }
                Op::Call { func } => {
                    let callee = p.func_index(func).expect("validated");
                    intra.push(next);
                    edges.push((Pc::new(callee, 0), EdgeKind::Call));
                }
                Op::Ret => {
                    for rs in &return_sites[pc.func] {
                        edges.push((*rs, EdgeKind::Return));
                    }
                }
                Op::Halt => {}
                Op::Spawn { func, .. } => {
                    let callee = p.func_index(func).expect("validated");
                    intra.push(next);
                    edges.push((next, EdgeKind::Fallthrough));
                    edges.push((Pc::new(callee, 0), EdgeKind::Spawn));
                }
                _ => {
                    intra.push(next);
                    edges.push((next, EdgeKind::Fallthrough));
                }
            }
            let from = g.node(pc);
            for t in &intra {
                let ti = g.node(*t);
                g.intra_preds[ti].push(pc);
            }
            g.intra_succs[from] = intra;
            for (to, kind) in edges {
                let e = Edge { from: pc, to, kind };
                let ti = g.node(to);
                g.succs[from].push(e);
                g.preds[ti].push(e);
            }
        }
        g
    }

    fn node(&self, pc: Pc) -> usize {
        self.offsets[pc.func] + pc.idx
    }

    /// Dense index of a node, usable for side tables.
    pub fn index(&self, pc: Pc) -> usize {
        self.node(pc)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Pc] {
        &self.nodes
    }

    pub fn succs(&self, pc: Pc) -> &[Edge] {
        &self.succs[self.node(pc)]
    }

    pub fn preds(&self, pc: Pc) -> &[Edge] {
        &self.preds[self.node(pc)]
    }

    pub fn intra_succs(&self, pc: Pc) -> &[Pc] {
        &self.intra_succs[self.node(pc)]
    }

    pub fn intra_preds(&self, pc: Pc) -> &[Pc] {
        &self.intra_preds[self.node(pc)]
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.succs.iter().flatten()
    }

    /// Positions reachable from `start` along intra-procedural edges.
    pub fn intra_reachable(&self, start: Pc) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut stack = vec![start];
        while let Some(pc) = stack.pop() {
            let i = self.node(pc);
            if std::mem::replace(&mut seen[i], true) {
                continue;
            }
            stack.extend(self.intra_succs(pc).iter().copied());
        }
        seen
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    #[test]
    fn straight_line_chain() {
        let p = parse_program("fn main {\n a: mov r0, 1\n b: mov r1, 2\n c: halt\n}").unwrap();
        let g = Icfg::build(&p);
        let edges: Vec<_> = g.edges().collect();
        assert_eq!(edges.len(), 2);
        assert!(edges.iter().all(|e| e.kind == EdgeKind::Fallthrough));
        assert_eq!(g.succs(Pc::new(0, 2)).len(), 0);
    }

    #[test]
    fn conditional_branch_has_two_successors() {
        let p = parse_program("fn main {\n a: cmp r0, 0\n b: je L5\n c: mov r0, 1\n L5: halt\n}").unwrap();
        let g = Icfg::build(&p);
        let s = g.succs(Pc::new(0, 1));
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].to, s[0].kind), (Pc::new(0, 2), EdgeKind::Fallthrough));
        assert_eq!((s[1].to, s[1].kind), (Pc::new(0, 3), EdgeKind::Branch));
    }

    #[test]
    fn call_and_return_edges() {
        // Hand-enumerated edge set for a five-instruction fixture.
        let p =
            parse_program("fn main {\n m1: mov r0, 1\n m2: call f\n m3: halt\n}\nfn f {\n f1: add r0, 1\n f2: ret\n}")
                .unwrap();
        let g = Icfg::build(&p);
        let mut got: Vec<(String, String, EdgeKind)> = g
            .edges()
            .map(|e| (p.id_at(e.from).to_string(), p.id_at(e.to).to_string(), e.kind))
            .collect();
        got.sort();
        let mut want = vec![
            ("main.m1".to_string(), "main.m2".to_string(), EdgeKind::Fallthrough),
            ("main.m2".into(), "f.f1".into(), EdgeKind::Call),
            ("f.f1".into(), "f.f2".into(), EdgeKind::Fallthrough),
            ("f.f2".into(), "main.m3".into(), EdgeKind::Return),
        ];
        want.sort();
        assert_eq!(got, want);
        assert_eq!(g.intra_succs(Pc::new(0, 1)), &[Pc::new(0, 2)]);
    }

    #[test]
    fn spawn_edges_are_distinct_from_calls() {
        let p = parse_program("fn main {\n s: spawn w, r1\n h: halt\n}\nfn w {\n r: ret\n}").unwrap();
        let g = Icfg::build(&p);
        let kinds: Vec<_> = g.succs(Pc::new(0, 0)).iter().map(|e| e.kind).collect();
        assert_eq!(kinds, vec![EdgeKind::Fallthrough, EdgeKind::Spawn]);
        // w is never called, so its ret has no return edges
        assert!(g.succs(Pc::new(1, 0)).is_empty());
    }
}
