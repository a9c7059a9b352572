//! The value-set lattice: a tuple of bounded sets per memory region.

use std::collections::BTreeSet;
use std::fmt;

use serde::ser::SerializeStruct;
use serde::Serialize;

use crate::ir::Register;

/// Elements a region set may hold before it widens to Top.
pub const SET_BOUND: usize = 16;

/// A finite set that widens to Top past [`SET_BOUND`] elements.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Bounded<T: Ord> {
    Set(BTreeSet<T>),
    Top,
}

impl<T: Ord> Default for Bounded<T> {
    fn default() -> Self {
        Bounded::Set(BTreeSet::new())
    }
}

impl<T: Ord + Clone> Bounded<T> {
    pub fn singleton(v: T) -> Self {
        Bounded::Set(BTreeSet::from([v]))
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, Bounded::Set(s) if s.is_empty())
    }

    pub fn is_top(&self) -> bool {
        matches!(self, Bounded::Top)
    }

    pub fn contains(&self, v: &T) -> bool {
        match self {
            Bounded::Set(s) => s.contains(v),
            Bounded::Top => true,
        }
    }

    pub fn insert(&mut self, v: T) -> bool {
        match self {
            Bounded::Top => false,
            Bounded::Set(s) => {
                let changed = s.insert(v);
                if s.len() > SET_BOUND {
                    *self = Bounded::Top;
                }
                changed
            }
        }
    }

    /// Pointwise union; returns whether `self` grew.
    pub fn union_with(&mut self, other: &Bounded<T>) -> bool {
        match (&mut *self, other) {
            (Bounded::Top, _) => false,
            (_, Bounded::Top) => {
                *self = Bounded::Top;
                true
            }
            (Bounded::Set(_), Bounded::Set(o)) => {
                let mut changed = false;
                for v in o {
                    changed |= self.insert(v.clone());
                }
                changed
            }
        }
    }

    /// Whether the two sets may share an element.
    pub fn overlaps(&self, other: &Bounded<T>) -> bool {
        match (self, other) {
            (Bounded::Set(a), Bounded::Set(b)) => a.intersection(b).next().is_some(),
            (Bounded::Top, o) | (o, Bounded::Top) => !o.is_empty(),
        }
    }

    pub fn elements(&self) -> Option<&BTreeSet<T>> {
        match self {
            Bounded::Set(s) => Some(s),
            Bounded::Top => None,
        }
    }

    pub fn map<U: Ord + Clone>(&self, f: impl Fn(&T) -> U) -> Bounded<U> {
        match self {
            Bounded::Top => Bounded::Top,
            Bounded::Set(s) => {
                let mut out = Bounded::default();
                for v in s {
                    out.insert(f(v));
                }
                out
            }
        }
    }
}

impl<T: Ord + Serialize> Serialize for Bounded<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Bounded::Top => s.serialize_str("top"),
            Bounded::Set(set) => set.serialize(s),
        }
    }
}

/// A stack a-loc: a slot at `offset` from the frame pointer of `func`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StackSlot {
    pub func: String,
    pub offset: i64,
}

impl StackSlot {
    pub fn new(func: impl Into<String>, offset: i64) -> Self {
        StackSlot {
            func: func.into(),
            offset,
        }
    }
}

impl fmt::Display for StackSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:+}", self.func, self.offset)
    }
}

impl Serialize for StackSlot {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Abstract location.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ALoc {
    Reg(Register),
    Global(u64),
    Stack(StackSlot),
    /// All objects from one allocation site.
    Heap(String),
}

impl ALoc {
    pub fn is_local(&self) -> bool {
        matches!(self, ALoc::Reg(_) | ALoc::Stack(_))
    }
}

impl fmt::Display for ALoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ALoc::Reg(r) => write!(f, "{r}"),
            ALoc::Global(a) => write!(f, "g{a}"),
            ALoc::Stack(s) => write!(f, "stack:{s}"),
            ALoc::Heap(site) => write!(f, "heap:{site}"),
        }
    }
}

impl Serialize for ALoc {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Tripartite value set plus a bounded set of plain constants.
/// The all-empty value is the lattice bottom.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct ValueSet {
    pub global: Bounded<u64>,
    pub stack: Bounded<StackSlot>,
    pub heap: Bounded<String>,
    pub consts: Bounded<i64>,
}

impl ValueSet {
    pub fn bottom() -> Self {
        ValueSet::default()
    }

    pub fn top() -> Self {
        ValueSet {
            global: Bounded::Top,
            stack: Bounded::Top,
            heap: Bounded::Top,
            consts: Bounded::Top,
        }
    }

    pub fn global(addr: u64) -> Self {
        ValueSet {
            global: Bounded::singleton(addr),
            ..Default::default()
        }
    }

    pub fn heap(site: impl Into<String>) -> Self {
        ValueSet {
            heap: Bounded::singleton(site.into()),
            ..Default::default()
        }
    }

    pub fn stack(slot: StackSlot) -> Self {
        ValueSet {
            stack: Bounded::singleton(slot),
            ..Default::default()
        }
    }

    pub fn constant(v: i64) -> Self {
        ValueSet {
            consts: Bounded::singleton(v),
            ..Default::default()
        }
    }

    pub fn any_const() -> Self {
        ValueSet {
            consts: Bounded::Top,
            ..Default::default()
        }
    }

    pub fn is_bottom(&self) -> bool {
        self.global.is_empty() && self.stack.is_empty() && self.heap.is_empty() && self.consts.is_empty()
    }

    /// Whether any address region is non-empty.
    pub fn has_address(&self) -> bool {
        !(self.global.is_empty() && self.stack.is_empty() && self.heap.is_empty())
    }

    /// Whether the set touches the global or heap region.
    pub fn is_shared(&self) -> bool {
        !self.global.is_empty() || !self.heap.is_empty()
    }

    pub fn union_with(&mut self, other: &ValueSet) -> bool {
        let mut changed = self.global.union_with(&other.global);
        changed |= self.stack.union_with(&other.stack);
        changed |= self.heap.union_with(&other.heap);
        changed |= self.consts.union_with(&other.consts);
        changed
    }

    pub fn union(mut self, other: &ValueSet) -> ValueSet {
        self.union_with(other);
        self
    }

    /// Address regions moved by `disp`; heap offsets are summarized per site.
    pub fn shifted(&self, disp: i64) -> ValueSet {
        ValueSet {
            global: self.global.map(|a| a.wrapping_add(disp as u64)),
            stack: self
                .stack
                .map(|s| StackSlot::new(s.func.clone(), s.offset.wrapping_add(disp))),
            heap: self.heap.clone(),
            consts: self.consts.map(|c| c.wrapping_add(disp)),
        }
    }

    /// Abstract `self + other`.
    pub fn add(&self, other: &ValueSet) -> ValueSet {
        if self.has_address() && other.has_address() {
            return ValueSet {
                global: top_if_any(&[!self.global.is_empty(), !other.global.is_empty()]),
                stack: top_if_any(&[!self.stack.is_empty(), !other.stack.is_empty()]),
                heap: top_if_any(&[!self.heap.is_empty(), !other.heap.is_empty()]),
                consts: Bounded::Top,
            };
        }
        let mut out = ValueSet::bottom();
        for (addrs, consts) in [(self, &other.consts), (other, &self.consts)] {
            match consts {
                Bounded::Top => {
                    if !addrs.global.is_empty() {
                        out.global = Bounded::Top;
                    }
                    if !addrs.stack.is_empty() {
                        out.stack = Bounded::Top;
                    }
                    if !addrs.heap.is_empty() {
                        out.heap = Bounded::Top;
                    }
                }
                Bounded::Set(cs) => {
                    for c in cs {
                        let s = addrs.shifted(*c);
                        out.global.union_with(&s.global);
                        out.stack.union_with(&s.stack);
                        out.heap.union_with(&s.heap);
                    }
                }
            }
        }
        out.consts = match (&self.consts, &other.consts) {
            (Bounded::Set(a), Bounded::Set(b)) => {
                let mut c = Bounded::default();
                for x in a {
                    for y in b {
                        c.insert(x.wrapping_add(*y));
                    }
                }
                c
            }
            (a, b) if a.is_empty() || b.is_empty() => Bounded::default(),
            _ => Bounded::Top,
        };
        out
    }

    /// Abstract `self - other`.
    pub fn sub(&self, other: &ValueSet) -> ValueSet {
        if other.has_address() {
            return ValueSet::top();
        }
        self.add(&ValueSet {
            consts: other.consts.map(|c| c.wrapping_neg()),
            ..Default::default()
        })
    }
}

fn top_if_any<T: Ord + Clone>(flags: &[bool]) -> Bounded<T> {
    if flags.iter().any(|f| *f) {
        Bounded::Top
    } else {
        Bounded::default()
    }
}

impl Serialize for ValueSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("ValueSet", 4)?;
        st.serialize_field("global", &self.global)?;
        st.serialize_field("stack", &self.stack)?;
        st.serialize_field("heap", &self.heap)?;
        st.serialize_field("consts", &self.consts)?;
        st.end()
    }
}

impl fmt::Display for ValueSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn part<T: Ord + fmt::Display>(b: &Bounded<T>, top: &str) -> String {
            match b {
                Bounded::Top => top.to_string(),
                Bounded::Set(s) if s.is_empty() => "⊥".to_string(),
                Bounded::Set(s) => {
                    let items: Vec<String> = s.iter().map(|v| v.to_string()).collect();
                    format!("{{{}}}", items.join(","))
                }
            }
        }
        let g = match &self.global {
            Bounded::Set(s) if !s.is_empty() => {
                let items: Vec<String> = s.iter().map(|a| format!("g{a}")).collect();
                format!("{{{}}}", items.join(","))
            }
            other => part(other, "TopGlobal"),
        };
        write!(
            f,
            "⟨{},{},{}⟩",
            g,
            part(&self.stack, "TopStack"),
            part(&self.heap, "TopHeap")
        )?;
        if !self.consts.is_empty() {
            write!(f, "+{}", part(&self.consts, "TopConst"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_widens_to_top() {
        let mut b = Bounded::default();
        for i in 0..SET_BOUND as u64 {
            b.insert(i);
        }
        assert!(!b.is_top());
        b.insert(99);
        assert!(b.is_top());
        assert!(b.contains(&12345));
    }

    #[test]
    fn add_shifts_within_region() {
        let g8 = ValueSet::global(8);
        let r = g8.add(&ValueSet::constant(4));
        assert_eq!(r, ValueSet::global(12));
        let h = ValueSet::heap("S").add(&ValueSet::constant(16));
        assert_eq!(h, ValueSet::heap("S"));
        let both = g8.add(&ValueSet::heap("S"));
        assert!(both.global.is_top() && both.heap.is_top());
        assert!(both.stack.is_empty());
        assert_eq!(ValueSet::constant(2).add(&ValueSet::constant(3)), ValueSet::constant(5));
        assert!(g8.add(&ValueSet::any_const()).global.is_top());
    }

    #[test]
    fn sub_of_pointer_is_top() {
        assert_eq!(ValueSet::global(8).sub(&ValueSet::global(4)), ValueSet::top());
        assert_eq!(ValueSet::global(8).sub(&ValueSet::constant(4)), ValueSet::global(4));
    }

    #[test]
    fn display_matches_tuple_notation() {
        assert_eq!(ValueSet::global(4).to_string(), "⟨{g4},⊥,⊥⟩");
        assert_eq!(ValueSet::bottom().to_string(), "⟨⊥,⊥,⊥⟩");
    }
}
