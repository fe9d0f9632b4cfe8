//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;

use oopdbg_core::vm::{ExecutionState, HeapObject, Oid, Value};
use rand::seq::SliceRandom;
use rand::Rng;

/// Bijection-checking comparison of two executions: same frames, pcs,
/// scalars and reference structure, up to renaming of oids and frame ids.
pub fn isomorphic(a: &ExecutionState, b: &ExecutionState) -> Result<(), String> {
    let mut m = Matcher::default();
    if a.status != b.status {
        return Err(format!("status {:?} vs {:?}", a.status, b.status));
    }
    if a.exception != b.exception {
        return Err(format!("exception {:?} vs {:?}", a.exception, b.exception));
    }
    if a.frames.len() != b.frames.len() {
        return Err(format!("depth {} vs {}", a.frames.len(), b.frames.len()));
    }
    for (i, (fa, fb)) in a.frames.iter().zip(&b.frames).enumerate() {
        let at = |what: &str| format!("frame {i} {what}");
        if fa.method != fb.method || fa.pc != fb.pc {
            return Err(format!("{}: {}@{} vs {}@{}", at("code"), fa.method.display_name(), fa.pc, fb.method.display_name(), fb.pc));
        }
        m.frame(fa.id, fb.id).map_err(|e| format!("{}: {e}", at("id")))?;
        match (fa.home, fb.home) {
            (None, None) => {}
            (Some(x), Some(y)) => m.frame(x, y).map_err(|e| format!("{}: {e}", at("home")))?,
            (x, y) => return Err(format!("{}: {x:?} vs {y:?}", at("home"))),
        }
        m.value(&fa.receiver, &fb.receiver).map_err(|e| format!("{}: {e}", at("receiver")))?;
        m.values(&fa.locals, &fb.locals).map_err(|e| format!("{}: {e}", at("locals")))?;
        m.values(&fa.entry_args, &fb.entry_args).map_err(|e| format!("{}: {e}", at("args")))?;
        m.values(&fa.stack, &fb.stack).map_err(|e| format!("{}: {e}", at("stack")))?;
    }
    match (&a.result, &b.result) {
        (None, None) => {}
        (Some(x), Some(y)) => m.value(x, y).map_err(|e| format!("result: {e}"))?,
        (x, y) => return Err(format!("result {x:?} vs {y:?}")),
    }
    if a.class_vars.keys().ne(b.class_vars.keys()) {
        return Err("class variable sets differ".into());
    }
    for (k, va) in &a.class_vars {
        m.value(va, &b.class_vars[k]).map_err(|e| format!("class var {k:?}: {e}"))?;
    }
    while let Some((x, y)) = m.pending.pop_front() {
        let (Some(ox), Some(oy)) = (a.heap.get(&x), b.heap.get(&y)) else {
            return Err(format!("dangling {x:?} / {y:?}"));
        };
        if ox.class != oy.class || ox.fields.len() != oy.fields.len() || ox.external.is_some() != oy.external.is_some() {
            return Err(format!("{x:?} {} vs {y:?} {}", ox.class, oy.class));
        }
        m.values(&ox.fields, &oy.fields).map_err(|e| format!("{x:?}.{}: {e}", ox.class))?;
    }
    Ok(())
}

#[derive(Default)]
struct Matcher {
    oids: HashMap<Oid, Oid>,
    back: HashMap<Oid, Oid>,
    frames: HashMap<u32, u32>,
    frames_back: HashMap<u32, u32>,
    pending: VecDeque<(Oid, Oid)>,
}

impl Matcher {
    fn frame(&mut self, x: u32, y: u32) -> Result<(), String> {
        match (self.frames.get(&x), self.frames_back.get(&y)) {
            (None, None) => {
                self.frames.insert(x, y);
                self.frames_back.insert(y, x);
                Ok(())
            }
            (Some(p), Some(q)) if *p == y && *q == x => Ok(()),
            _ => Err(format!("frame {x} cannot map to {y}")),
        }
    }

    fn value(&mut self, x: &Value, y: &Value) -> Result<(), String> {
        match (x, y) {
            (Value::Ref(p), Value::Ref(q)) => match (self.oids.get(p), self.back.get(q)) {
                (None, None) => {
                    self.oids.insert(*p, *q);
                    self.back.insert(*q, *p);
                    self.pending.push_back((*p, *q));
                    Ok(())
                }
                (Some(a), Some(b)) if a == q && b == p => Ok(()),
                _ => Err(format!("{p:?} cannot map to {q:?}")),
            },
            (Value::Float(p), Value::Float(q)) if p.to_bits() == q.to_bits() => Ok(()),
            (Value::Ref(_), _) | (_, Value::Ref(_)) | (Value::Float(_), _) => Err(format!("{x:?} vs {y:?}")),
            _ if x == y => Ok(()),
            _ => Err(format!("{x:?} vs {y:?}")),
        }
    }

    fn values(&mut self, xs: &[Value], ys: &[Value]) -> Result<(), String> {
        if xs.len() != ys.len() {
            return Err(format!("{} values vs {}", xs.len(), ys.len()));
        }
        xs.iter().zip(ys).try_for_each(|(x, y)| self.value(x, y))
    }
}

fn refs(vs: &[Value]) -> impl Iterator<Item = Oid> + '_ {
    vs.iter().filter_map(|v| match v {
        Value::Ref(o) => Some(*o),
        _ => None,
    })
}

/// Roots in the documented traversal order: frames bottom to top, each
/// receiver, locals, operand stack and entry arguments; then class variables.
pub fn roots(st: &ExecutionState) -> Vec<Oid> {
    let mut out = Vec::new();
    for f in &st.frames {
        out.extend(refs(std::slice::from_ref(&f.receiver)));
        out.extend(refs(&f.locals));
        out.extend(refs(&f.stack));
        out.extend(refs(&f.entry_args));
    }
    let cv: Vec<Value> = st.class_vars.values().cloned().collect();
    out.extend(refs(&cv));
    out
}

/// Breadth-first closure over the heap from `roots`, in discovery order.
pub fn bfs_closure(heap: &BTreeMap<Oid, HeapObject>, roots: &[Oid]) -> Vec<Oid> {
    let mut seen = BTreeSet::new();
    let mut order = Vec::new();
    let mut queue = VecDeque::new();
    for r in roots {
        if seen.insert(*r) {
            order.push(*r);
            queue.push_back(*r);
        }
    }
    while let Some(o) = queue.pop_front() {
        for c in refs(&heap[&o].fields) {
            if seen.insert(c) {
                order.push(c);
                queue.push_back(c);
            }
        }
    }
    order
}

/// Reachable set by naive fixpoint iteration.
pub fn fixpoint_closure(heap: &BTreeMap<Oid, HeapObject>, roots: &[Oid]) -> BTreeSet<Oid> {
    let mut set: BTreeSet<Oid> = roots.iter().copied().collect();
    loop {
        let next: BTreeSet<Oid> =
            set.iter().flat_map(|o| refs(&heap[o].fields).collect::<Vec<_>>()).chain(set.iter().copied()).collect();
        if next.len() == set.len() {
            return set;
        }
        set = next;
    }
}

/// Replaces the heap of a halted state with a random graph of `n` Array
/// objects (cycles, shared nodes, scalars and garbage included) and points
/// the top frame's locals at some of them.
pub fn random_graph(st: &mut ExecutionState, rng: &mut impl Rng, n: usize) {
    let keep: Vec<Oid> = st.frames.iter().filter_map(|f| match f.receiver {
        Value::Ref(o) => Some(o),
        _ => None,
    }).collect();
    st.heap.retain(|o, _| keep.contains(o));
    let base = st.next_oid;
    let oids: Vec<Oid> = (0..n as u64).map(|i| Oid(base + i)).collect();
    for &oid in &oids {
        let width = rng.gen_range(0..6);
        let fields = (0..width)
            .map(|_| match rng.gen_range(0..10) {
                0 => Value::Nil,
                1 => Value::Int(rng.gen_range(-1000..1000)),
                2 => Value::from(format!("s{}", rng.gen_range(0..50))),
                3 => Value::Float(rng.gen_range(-1.0..1.0)),
                _ => Value::Ref(*oids.choose(rng).expect("non-empty")),
            })
            .collect();
        st.heap.insert(oid, HeapObject::new("Array", fields));
    }
    st.next_oid = base + n as u64;
    let top = st.frames.len() - 1;
    for l in st.frames[top].locals.iter_mut() {
        *l = match rng.gen_range(0..4) {
            0 => Value::Nil,
            1 => Value::Int(7),
            _ => Value::Ref(*oids.choose(rng).expect("non-empty")),
        };
    }
}

/// Generator for small deterministic guest programs. Every program halts
/// at least once inside `P>>go`, allocates linked nodes with cycles, calls
/// helper methods and blocks, and terminates without fuel limits.
pub struct ProgramGen<'r, R: Rng> {
    rng: &'r mut R,
    helpers: usize,
    out: String,
}

pub const NODE_CLASS: &str = "class Node {
  var val, next, other;
  method init(v) { val := v; return self; }
  method val() { return val; }
  method next() { return next; }
  method setNext(n) { next := n; }
  method setOther(o) { other := o; }
  method walk(k) {
    var s, n;
    s := 0;
    n := self;
    while (n != nil && k > 0) { s := s + n.val(); n := n.next(); k := k - 1; }
    return s;
  }
}
";

impl<'r, R: Rng> ProgramGen<'r, R> {
    pub fn generate(rng: &'r mut R) -> String {
        let helpers = rng.gen_range(1..4);
        let mut g = ProgramGen { rng, helpers, out: String::new() };
        g.program();
        g.out
    }

    fn program(&mut self) {
        let halting = self.rng.gen_range(0..=self.helpers);
        let raising = (self.rng.gen_bool(0.2)).then(|| self.rng.gen_range(0..self.helpers));
        // Reach the halting helper through every helper before it.
        let chain = halting < self.helpers && self.rng.gen_bool(0.5);
        self.out.push_str(NODE_CLASS);
        self.out.push_str("class P {\n  var acc, head;\n  method go(seed) {\n");
        self.out.push_str("    var a, b, i, j, s, n1, n2, blk;\n");
        self.out.push_str("    acc := 0; a := seed; b := 1; s := \"s\";\n");
        self.out.push_str("    n1 := new Node().init(1); n2 := new Node().init(2); head := n1;\n");
        let count = self.rng.gen_range(3..9);
        let halt_at = self.rng.gen_range(0..=count);
        for k in 0..=count {
            if k == halt_at {
                if halting == self.helpers {
                    self.out.push_str("    halt;\n");
                } else {
                    let first = if chain { 0 } else { halting };
                    let _ = writeln!(self.out, "    acc := acc + self.h{first}(a);");
                }
            }
            if k < count {
                self.stmt(2, 0, &Scope::Go);
            }
        }
        self.out.push_str("    return acc + n1.walk(4) + @strLen(s);\n  }\n");
        for h in 0..self.helpers {
            let _ = writeln!(self.out, "  method h{h}(x) {{\n    var t, i;\n    t := x % 1000;");
            if chain && h < halting {
                let _ = writeln!(self.out, "    t := t + self.h{}(t);", h + 1);
            }
            let count = self.rng.gen_range(1..5);
            let halt_at = (h == halting).then(|| self.rng.gen_range(0..=count));
            for k in 0..=count {
                if Some(k) == halt_at {
                    self.out.push_str("    halt;\n");
                }
                if raising == Some(h) && k == 0 {
                    self.out.push_str("    if (t % 5 == 3) { raise Bad(\"t was \" + @toStr(t)); }\n");
                }
                if k < count {
                    self.stmt(2, 0, &Scope::Helper(h));
                }
            }
            self.out.push_str("    return t;\n  }\n");
        }
        self.out.push_str("}\n");
    }

    fn int_var(&mut self, scope: &Scope, loop_depth: usize) -> String {
        let mut vars: Vec<&str> = match scope {
            Scope::Go => vec!["a", "b", "acc"],
            Scope::Helper(_) => vec!["t", "acc", "x"],
        };
        if loop_depth > 0 {
            vars.push("i");
        }
        if loop_depth > 1 && matches!(scope, Scope::Go) {
            vars.push("j");
        }
        vars.choose(self.rng).expect("non-empty").to_string()
    }

    fn expr(&mut self, scope: &Scope, loop_depth: usize, depth: usize) -> String {
        if depth == 0 || self.rng.gen_bool(0.35) {
            return if self.rng.gen_bool(0.4) {
                self.rng.gen_range(0..20).to_string()
            } else {
                self.int_var(scope, loop_depth)
            };
        }
        let l = self.expr(scope, loop_depth, depth - 1);
        let r = self.expr(scope, loop_depth, depth - 1);
        match self.rng.gen_range(0..5) {
            0 | 1 => format!("({l} + {r})"),
            2 => format!("({l} - {r})"),
            3 => format!("(({l} * {r}) % 1009)"),
            _ => format!("({l} % {})", self.rng.gen_range(2..13)),
        }
    }

    fn cond(&mut self, scope: &Scope, loop_depth: usize) -> String {
        let l = self.expr(scope, loop_depth, 1);
        let r = self.expr(scope, loop_depth, 1);
        match self.rng.gen_range(0..4) {
            0 => format!("{l} < {r}"),
            1 => format!("{l} == {r}"),
            2 => format!("!({l} <= {r})"),
            _ => format!("{l} > 0 && {r} < 10"),
        }
    }

    fn line(&mut self, indent: usize, s: &str) {
        let _ = writeln!(self.out, "{}{s}", "  ".repeat(indent));
    }

    fn stmt(&mut self, indent: usize, loop_depth: usize, scope: &Scope) {
        let nested = indent < 4;
        let choice = self.rng.gen_range(0..if nested { 12 } else { 9 });
        let e = self.expr(scope, loop_depth, 2);
        match (scope, choice) {
            (Scope::Go, 0) => self.line(indent, &format!("a := {e} % 1000;")),
            (Scope::Go, 1) => self.line(indent, &format!("b := {e} % 1000;")),
            (Scope::Go, 2) => self.line(indent, &format!("s := s + @toStr({e});")),
            (Scope::Go, 3) => {
                self.line(indent, &format!("n2 := new Node().init({e}); n2.setNext(n1); n1 := n2;"));
            }
            (Scope::Go, 4) => self.line(indent, "n1.setOther(head); head.setOther(n2);"),
            (Scope::Go, 5) => {
                let k = self.rng.gen_range(1..6);
                self.line(indent, &format!("acc := acc + n1.walk({k});"));
            }
            (Scope::Go, 6) => {
                self.line(indent, "blk := fn(y) { acc := acc + 1; return y + a; };");
                self.line(indent, &format!("b := blk.value({e}) % 1000;"));
            }
            (Scope::Go, 7) => {
                let h = self.rng.gen_range(0..self.helpers);
                self.line(indent, &format!("acc := acc + self.h{h}({e});"));
            }
            (Scope::Helper(_), 0 | 1 | 2) => self.line(indent, &format!("t := {e} % 1000;")),
            (Scope::Helper(_), 3) => self.line(indent, &format!("head := new Node().init({e});")),
            (Scope::Helper(h), 4 | 5) if h + 1 < self.helpers => {
                let callee = self.rng.gen_range(h + 1..self.helpers);
                self.line(indent, &format!("t := t + self.h{callee}({e});"));
            }
            (Scope::Helper(_), 6) => {
                self.line(indent, &format!("t := (fn(y) {{ return y * 2 + t; }}).value({e}) % 1000;"));
            }
            (_, 9 | 10) => {
                let c = self.cond(scope, loop_depth);
                self.line(indent, &format!("if ({c}) {{"));
                self.stmt(indent + 1, loop_depth, scope);
                self.line(indent, "} else {");
                self.stmt(indent + 1, loop_depth, scope);
                self.line(indent, "}");
            }
            (_, 11) if loop_depth == 0 || (loop_depth == 1 && matches!(scope, Scope::Go)) => {
                let v = if loop_depth == 0 { "i" } else { "j" };
                let n = self.rng.gen_range(1..5);
                self.line(indent, &format!("{v} := 0;"));
                self.line(indent, &format!("while ({v} < {n}) {{"));
                for _ in 0..self.rng.gen_range(1..3) {
                    self.stmt(indent + 1, loop_depth + 1, scope);
                }
                self.line(indent + 1, &format!("{v} := {v} + 1;"));
                self.line(indent, "}");
            }
            _ => self.line(indent, &format!("acc := acc + {e};")),
        }
    }
}

enum Scope {
    Go,
    Helper(usize),
}
