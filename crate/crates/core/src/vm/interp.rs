use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use super::bytecode::{BinOp, CodeUnit, Instr, Prim};
use super::compiler::{compile_eval, ClassScope};
use super::error::{EvalError, SpawnError, StepError};
use super::host::{latin1, ResourceHost};
use super::image::{ProgramImage, ARRAY_CLASS, BLOCK_CLASS, FILE_STREAM_CLASS};
use super::parser::parse_eval;
use super::state::{
    ExecutionState, Frame, GuestException, HeapObject, MethodRef, Status, TaskArgs, EVAL_SELECTOR,
};
use super::value::{Oid, Value};

/// Deepest call stack a guest may build before `StackOverflow` is raised.
pub const MAX_DEPTH: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StepOp {
    /// Execute one instruction.
    Into,
    /// Execute until control is back in the current frame or a caller.
    Over,
    /// As `Over`, but also stop on entry to a block whose home is the
    /// current frame.
    Through,
    /// Restart the frame at this index, counted from the top (0 = innermost).
    Restart(usize),
    /// Run until the next halt, exception or completion.
    Proceed,
}

impl StepOp {
    pub fn name(self) -> &'static str {
        match self {
            StepOp::Into => "into",
            StepOp::Over => "over",
            StepOp::Through => "through",
            StepOp::Restart(_) => "restart",
            StepOp::Proceed => "proceed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    Normal,
    Entered,
    Returned,
    Halted,
    Raised,
    Completed,
}

/// A guest-level exception raised while executing an instruction.
#[derive(Debug)]
struct Raise {
    class: String,
    message: String,
}

fn raise<T>(class: &str, message: impl Into<String>) -> Result<T, Raise> {
    Err(Raise { class: class.to_string(), message: message.into() })
}

type Exec<T> = Result<T, Raise>;

/// Result of evaluating an expression in a frame.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub value: Value,
    /// The value as the guest would print it.
    pub display: String,
    /// The state after evaluation, including any side effects.
    pub state: ExecutionState,
}

/// Interprets code from one image against a host.
pub struct Vm<'a> {
    image: &'a ProgramImage,
    host: &'a mut dyn ResourceHost,
    fuel: Option<u64>,
    exhausted: bool,
}

/// Creates an execution that will send `selector` to a fresh instance of
/// `class` with the given arguments.
pub fn spawn(
    image: &ProgramImage,
    class: &str,
    selector: &str,
    args: &TaskArgs,
) -> Result<ExecutionState, SpawnError> {
    let c = image.class(class).ok_or_else(|| SpawnError::UnknownClass(class.to_string()))?;
    let m = image
        .method(class, selector)
        .ok_or_else(|| SpawnError::UnknownSelector { class: class.to_string(), selector: selector.to_string() })?;
    if m.params.len() != args.values.len() {
        return Err(SpawnError::WrongArity {
            selector: selector.to_string(),
            expected: m.params.len(),
            got: args.values.len(),
        });
    }
    let mut st = ExecutionState::default();
    let mut map = BTreeMap::new();
    for (oid, obj) in &args.heap {
        if obj.external.is_some() {
            return Err(SpawnError::BadArgs(format!("{oid} wraps an external resource")));
        }
        map.insert(*oid, st.alloc(obj.clone()));
    }
    let remap = |v: &Value| -> Result<Value, SpawnError> {
        match v {
            Value::Ref(o) => map
                .get(o)
                .map(|n| Value::Ref(*n))
                .ok_or_else(|| SpawnError::BadArgs(format!("dangling reference {o}"))),
            other => Ok(other.clone()),
        }
    };
    for new in map.values() {
        let fields = st.heap[new].fields.iter().map(remap).collect::<Result<Vec<_>, _>>()?;
        st.heap.get_mut(new).expect("just allocated").fields = fields;
    }
    let values = args.values.iter().map(remap).collect::<Result<Vec<_>, _>>()?;
    let ivars = if class == ARRAY_CLASS { 0 } else { c.ivars.len() };
    let receiver = st.alloc(HeapObject::new(class, vec![Value::Nil; ivars]));
    let code = Arc::clone(&m.code);
    push_frame(&mut st, MethodRef::method(class, selector), code, None, Value::Ref(receiver), values);
    st.collect_garbage(&[]);
    Ok(st)
}

fn push_frame(
    st: &mut ExecutionState,
    method: MethodRef,
    code: Arc<CodeUnit>,
    home: Option<u32>,
    receiver: Value,
    args: Vec<Value>,
) {
    let mut locals = args.clone();
    locals.resize(code.local_names.len(), Value::Nil);
    let id = st.next_frame_id;
    st.next_frame_id += 1;
    st.frames.push(Frame { id, method, code, home, pc: 0, receiver, locals, entry_args: args, stack: Vec::new() });
}

pub fn truthy(v: &Value) -> bool {
    !matches!(v, Value::Nil | Value::Bool(false))
}

/// The value as guest code prints it.
pub fn render(st: &ExecutionState, v: &Value) -> String {
    match v {
        Value::Ref(oid) => match st.object(*oid) {
            Some(obj) if &*obj.class == ARRAY_CLASS => format!("an Array({})", obj.fields.len()),
            Some(obj) => {
                let article = if obj.class.starts_with(['A', 'E', 'I', 'O', 'U']) { "an" } else { "a" };
                format!("{article} {}", obj.class)
            }
            None => format!("a dangling {oid}"),
        },
        other => other.to_string(),
    }
}

fn top_relative(st: &ExecutionState, k: usize) -> Result<usize, StepError> {
    let depth = st.depth();
    if k >= depth {
        return Err(StepError::InvalidFrameIndex { index: k, depth });
    }
    Ok(depth - 1 - k)
}

fn check_steppable(st: &ExecutionState) -> Result<(), StepError> {
    match st.status {
        Status::Completed | Status::Failed => Err(StepError::StepAtCompletedState(st.status.name())),
        _ if st.frames.is_empty() => Err(StepError::NotSuspended),
        _ => Ok(()),
    }
}

impl<'a> Vm<'a> {
    pub fn new(image: &'a ProgramImage, host: &'a mut dyn ResourceHost) -> Vm<'a> {
        Vm { image, host, fuel: None, exhausted: false }
    }

    /// Limits the number of instructions this VM will execute.
    pub fn with_fuel(mut self, fuel: u64) -> Vm<'a> {
        self.fuel = Some(fuel);
        self
    }

    /// True once the instruction budget ran out.
    pub fn fuel_exhausted(&self) -> bool {
        self.exhausted
    }

    pub fn image(&self) -> &ProgramImage {
        self.image
    }

    /// Runs until the execution halts, raises or completes.
    pub fn run(&mut self, st: &mut ExecutionState) -> Result<Status, StepError> {
        self.step(st, StepOp::Proceed)
    }

    pub fn step(&mut self, st: &mut ExecutionState, op: StepOp) -> Result<Status, StepError> {
        if let StepOp::Restart(k) = op {
            return self.restart(st, k);
        }
        check_steppable(st)?;
        match st.status {
            Status::SuspendedOnHalt => {
                if let Some(f) = st.frames.last_mut() {
                    f.pc += 1;
                }
            }
            Status::SuspendedOnException => st.exception = None,
            _ => {}
        }
        st.status = Status::Running;
        let base_depth = st.depth();
        let base_id = st.top().map(|f| f.id);
        loop {
            if self.burn() {
                st.status = Status::SuspendedOnStep;
                break;
            }
            let ev = self.exec_one(st);
            if matches!(ev, Event::Halted | Event::Raised | Event::Completed) {
                break;
            }
            let stop = match op {
                StepOp::Into => true,
                StepOp::Over => st.depth() <= base_depth,
                StepOp::Through => {
                    st.depth() <= base_depth
                        || (ev == Event::Entered
                            && st.top().is_some_and(|f| f.method.is_block() && f.home == base_id))
                }
                StepOp::Proceed | StepOp::Restart(_) => false,
            };
            if stop {
                st.status = Status::SuspendedOnStep;
                break;
            }
        }
        st.collect_garbage(&[]);
        Ok(st.status)
    }

    fn burn(&mut self) -> bool {
        match &mut self.fuel {
            Some(0) => {
                self.exhausted = true;
                true
            }
            Some(n) => {
                *n -= 1;
                false
            }
            None => false,
        }
    }

    /// Drops the frames above `k`, then rewinds frame `k` to its first
    /// instruction with its original arguments. Methods are re-resolved in
    /// the current image so edited code takes effect.
    pub fn restart(&mut self, st: &mut ExecutionState, k: usize) -> Result<Status, StepError> {
        check_steppable(st)?;
        let idx = top_relative(st, k)?;
        st.frames.truncate(idx + 1);
        let code = {
            let f = &st.frames[idx];
            if &*f.method.selector == EVAL_SELECTOR {
                Arc::clone(&f.code)
            } else if let Some(&last) = f.method.block_path.last() {
                f.home
                    .and_then(|h| st.frame_by_id(h))
                    .and_then(|hi| st.frames[hi].code.blocks.get(last as usize).cloned())
                    .filter(|c| c.param_count == f.code.param_count)
                    .unwrap_or_else(|| Arc::clone(&f.code))
            } else {
                self.image
                    .method(&f.method.class, &f.method.selector)
                    .filter(|m| m.code.param_count == f.code.param_count)
                    .map(|m| Arc::clone(&m.code))
                    .unwrap_or_else(|| Arc::clone(&f.code))
            }
        };
        let f = &mut st.frames[idx];
        f.locals = f.entry_args.clone();
        f.locals.resize(code.local_names.len(), Value::Nil);
        f.code = code;
        f.pc = 0;
        f.stack.clear();
        st.status = Status::SuspendedOnStep;
        st.exception = None;
        st.collect_garbage(&[]);
        Ok(st.status)
    }

    /// Evaluates `source` in the scope of frame `k` (counted from the top)
    /// on a copy of `st`. The copy, with any side effects, is returned.
    pub fn evaluate(&mut self, st: &ExecutionState, k: usize, source: &str) -> Result<EvalOutcome, EvalError> {
        check_steppable(st)?;
        if !st.status.is_suspended() {
            return Err(EvalError::Step(StepError::NotSuspended));
        }
        let idx = top_relative(st, k)?;
        let target = &st.frames[idx];
        let mut outer = vec![target.code.local_names.clone()];
        let mut home = target.home;
        while let Some(hi) = home.and_then(|h| st.frame_by_id(h)) {
            outer.push(st.frames[hi].code.local_names.clone());
            home = st.frames[hi].home;
        }
        let class = self.image.class(&target.method.class);
        let ivars = class.map(|c| c.ivars.clone()).unwrap_or_default();
        let cvars: Vec<String> = class.map(|c| c.class_vars.iter().map(|(n, _)| n.clone()).collect()).unwrap_or_default();
        let scope = ClassScope { class: &target.method.class, ivars: &ivars, class_vars: &cvars };
        let stmts = parse_eval(source)?;
        let code = compile_eval(&stmts, &outer, &scope)?;

        let mut cand = st.clone();
        let saved = (cand.status, cand.exception.take(), cand.next_frame_id, cand.instructions);
        cand.status = Status::Running;
        let method = MethodRef {
            class: Arc::clone(&target.method.class),
            selector: Arc::from(EVAL_SELECTOR),
            block_path: vec![],
        };
        push_frame(&mut cand, method, Arc::new(code), Some(target.id), target.receiver.clone(), vec![]);
        let depth = cand.depth();
        loop {
            if self.burn() {
                return Err(EvalError::FuelExhausted);
            }
            match self.exec_one(&mut cand) {
                Event::Halted => return Err(EvalError::Halted),
                Event::Raised => return Err(EvalError::Guest(cand.exception.clone().expect("raised"))),
                Event::Completed => break,
                _ if cand.depth() < depth => break,
                _ => {}
            }
        }
        let value = match cand.status {
            Status::Completed => cand.result.take().unwrap_or(Value::Nil),
            _ => cand.frames.last_mut().and_then(|f| f.stack.pop()).unwrap_or(Value::Nil),
        };
        let display = render(&cand, &value);
        cand.status = saved.0;
        cand.exception = saved.1;
        cand.next_frame_id = saved.2;
        cand.instructions = saved.3;
        cand.collect_garbage(&[]);
        Ok(EvalOutcome { value, display, state: cand })
    }

    fn exec_one(&mut self, st: &mut ExecutionState) -> Event {
        st.instructions += 1;
        match self.exec(st) {
            Ok(ev) => ev,
            Err(Raise { class, message }) => {
                let frame_index = st.frames.len() - 1;
                let pc = st.frames[frame_index].pc;
                st.exception = Some(GuestException { class_name: class, message, frame_index, pc });
                st.status = Status::SuspendedOnException;
                Event::Raised
            }
        }
    }

    fn exec(&mut self, st: &mut ExecutionState) -> Exec<Event> {
        let fi = st.frames.len() - 1;
        let code = Arc::clone(&st.frames[fi].code);
        let pc = st.frames[fi].pc;
        let Some(instr) = code.instrs.get(pc) else {
            return raise("VMError", format!("pc {pc} outside code"));
        };
        match instr {
            Instr::PushNil => self.push(st, Value::Nil),
            Instr::PushTrue => self.push(st, Value::Bool(true)),
            Instr::PushFalse => self.push(st, Value::Bool(false)),
            Instr::PushSelf => {
                let v = st.frames[fi].receiver.clone();
                self.push(st, v)
            }
            Instr::PushInt(i) => self.push(st, Value::Int(*i)),
            Instr::PushFloat(x) => self.push(st, Value::Float(*x)),
            Instr::PushStr(s) => self.push(st, Value::Str(Arc::clone(s))),
            Instr::LoadLocal(s) => {
                let v = local(&st.frames[fi], *s)?.clone();
                self.push(st, v)
            }
            Instr::StoreLocal(s) => {
                let v = peek(&st.frames[fi], 0)?.clone();
                local(&st.frames[fi], *s)?;
                st.frames[fi].locals[*s as usize] = v;
                advance(st)
            }
            Instr::LoadOuter { depth, slot } => {
                let oi = outer_frame(st, fi, *depth)?;
                let v = local(&st.frames[oi], *slot)?.clone();
                self.push(st, v)
            }
            Instr::StoreOuter { depth, slot } => {
                let oi = outer_frame(st, fi, *depth)?;
                let v = peek(&st.frames[fi], 0)?.clone();
                local(&st.frames[oi], *slot)?;
                st.frames[oi].locals[*slot as usize] = v;
                advance(st)
            }
            Instr::LoadIvar(name) => {
                let (oid, i) = self.ivar_slot(st, fi, name)?;
                let v = st.heap[&oid].fields[i].clone();
                self.push(st, v)
            }
            Instr::StoreIvar(name) => {
                let (oid, i) = self.ivar_slot(st, fi, name)?;
                let v = peek(&st.frames[fi], 0)?.clone();
                st.heap.get_mut(&oid).expect("checked").fields[i] = v;
                advance(st)
            }
            Instr::LoadClassVar { class, name } => {
                let v = match st.class_vars.get(&(Arc::clone(class), Arc::clone(name))) {
                    Some(v) => v.clone(),
                    None => match self.image.class(class).and_then(|c| c.class_var(name)) {
                        Some(v) => v.clone(),
                        None => return raise("UndefinedVariable", format!("{class} has no class variable {name}")),
                    },
                };
                self.push(st, v)
            }
            Instr::StoreClassVar { class, name } => {
                if self.image.class(class).and_then(|c| c.class_var(name)).is_none() {
                    return raise("UndefinedVariable", format!("{class} has no class variable {name}"));
                }
                let v = peek(&st.frames[fi], 0)?.clone();
                st.class_vars.insert((Arc::clone(class), Arc::clone(name)), v);
                advance(st)
            }
            Instr::Binary(op) => {
                let f = &st.frames[fi];
                let r = binary(st, *op, peek(f, 1)?, peek(f, 0)?)?;
                let f = &mut st.frames[fi];
                f.stack.truncate(f.stack.len() - 2);
                self.push(st, r)
            }
            Instr::Not => {
                let v = Value::Bool(!truthy(peek(&st.frames[fi], 0)?));
                st.frames[fi].stack.pop();
                self.push(st, v)
            }
            Instr::Neg => {
                let v = match peek(&st.frames[fi], 0)? {
                    Value::Int(i) => match i.checked_neg() {
                        Some(n) => Value::Int(n),
                        None => return raise("ArithmeticOverflow", format!("-({i}) overflows")),
                    },
                    Value::Float(x) => Value::Float(-x),
                    other => return raise("TypeError", format!("cannot negate {}", other.type_name())),
                };
                st.frames[fi].stack.pop();
                self.push(st, v)
            }
            Instr::Send { selector, argc } => self.send(st, fi, selector, *argc as usize),
            Instr::New { class } => {
                let Some(c) = self.image.class(class) else {
                    return raise("UnknownClass", format!("no class named {class}"));
                };
                let n = if &**class == ARRAY_CLASS { 0 } else { c.ivars.len() };
                let oid = st.alloc(HeapObject::new(class, vec![Value::Nil; n]));
                self.push(st, Value::Ref(oid))
            }
            Instr::Prim { prim, argc } => {
                let f = &st.frames[fi];
                let argc = *argc as usize;
                if f.stack.len() < argc {
                    return raise("VMError", "operand stack underflow");
                }
                let args: Vec<Value> = f.stack[f.stack.len() - argc..].to_vec();
                let r = self.prim(st, *prim, &args)?;
                let f = &mut st.frames[fi];
                f.stack.truncate(f.stack.len() - argc);
                self.push(st, r)
            }
            Instr::MakeBlock(idx) => {
                if code.blocks.get(*idx as usize).is_none() {
                    return raise("VMError", format!("no block {idx}"));
                }
                let f = &st.frames[fi];
                let fields = vec![Value::Int(f.id as i64), f.receiver.clone(), Value::Int(*idx as i64)];
                let oid = st.alloc(HeapObject::new(BLOCK_CLASS, fields));
                self.push(st, Value::Ref(oid))
            }
            Instr::Jump(t) => {
                st.frames[fi].pc = *t as usize;
                Ok(Event::Normal)
            }
            Instr::JumpIfFalse(t) => {
                let v = truthy(peek(&st.frames[fi], 0)?);
                let f = &mut st.frames[fi];
                f.stack.pop();
                f.pc = if v { pc + 1 } else { *t as usize };
                Ok(Event::Normal)
            }
            Instr::JumpIfFalseKeep(t) | Instr::JumpIfTrueKeep(t) => {
                let v = truthy(peek(&st.frames[fi], 0)?);
                let branch_on = matches!(instr, Instr::JumpIfTrueKeep(_));
                let f = &mut st.frames[fi];
                if v == branch_on {
                    f.pc = *t as usize;
                } else {
                    f.stack.pop();
                    f.pc = pc + 1;
                }
                Ok(Event::Normal)
            }
            Instr::Pop => {
                peek(&st.frames[fi], 0)?;
                st.frames[fi].stack.pop();
                advance(st)
            }
            Instr::Dup => {
                let v = peek(&st.frames[fi], 0)?.clone();
                st.frames[fi].stack.push(v);
                advance(st)
            }
            Instr::Return => {
                let v = peek(&st.frames[fi], 0)?.clone();
                st.frames.pop();
                match st.frames.last_mut() {
                    Some(caller) => {
                        caller.stack.push(v);
                        Ok(Event::Returned)
                    }
                    None => {
                        st.result = Some(v);
                        st.status = Status::Completed;
                        Ok(Event::Completed)
                    }
                }
            }
            Instr::Halt => {
                st.status = Status::SuspendedOnHalt;
                Ok(Event::Halted)
            }
            Instr::Raise { class } => {
                let msg = render(st, peek(&st.frames[fi], 0)?);
                raise(class, msg)
            }
        }
    }

    fn push(&self, st: &mut ExecutionState, v: Value) -> Exec<Event> {
        let f = st.frames.last_mut().expect("frame");
        f.stack.push(v);
        f.pc += 1;
        Ok(Event::Normal)
    }

    fn ivar_slot(&self, st: &ExecutionState, fi: usize, name: &str) -> Exec<(Oid, usize)> {
        let recv = &st.frames[fi].receiver;
        let Some(oid) = recv.as_ref_oid() else {
            return raise("UndefinedVariable", format!("{} has no instance variable {name}", recv.type_name()));
        };
        let Some(obj) = st.heap.get(&oid) else {
            return raise("VMError", format!("dangling receiver {oid}"));
        };
        match self.image.class(&obj.class).and_then(|c| c.ivar_index(name)) {
            Some(i) if i < obj.fields.len() => Ok((oid, i)),
            _ => raise("UndefinedVariable", format!("{} has no instance variable {name}", obj.class)),
        }
    }

    fn send(&mut self, st: &mut ExecutionState, fi: usize, selector: &Arc<str>, argc: usize) -> Exec<Event> {
        let f = &st.frames[fi];
        let recv = peek(f, argc)?.clone();
        let (code, method, receiver, home) = match &recv {
            Value::Ref(oid) => {
                let Some(obj) = st.heap.get(oid) else {
                    return raise("VMError", format!("dangling receiver {oid}"));
                };
                if &*obj.class == BLOCK_CLASS && &**selector == "value" {
                    let home_id = obj.fields.first().and_then(Value::as_int).unwrap_or(-1);
                    let index = obj.fields.get(2).and_then(Value::as_int).unwrap_or(-1);
                    let Some(hi) = u32::try_from(home_id).ok().and_then(|h| st.frame_by_id(h)) else {
                        return raise("BlockContextDead", "the block's home method has returned");
                    };
                    let hf = &st.frames[hi];
                    let Some(code) = usize::try_from(index).ok().and_then(|i| hf.code.blocks.get(i)) else {
                        return raise("VMError", format!("block index {index} out of range"));
                    };
                    let mut method = hf.method.clone();
                    method.block_path.push(index as u16);
                    let self_value = obj.fields.get(1).cloned().unwrap_or(Value::Nil);
                    (Arc::clone(code), method, self_value, Some(hf.id))
                } else {
                    let Some(m) = self.image.method(&obj.class, selector) else {
                        return raise("MessageNotUnderstood", format!("{} does not understand {selector}", obj.class));
                    };
                    (Arc::clone(&m.code), MethodRef::method(&obj.class, selector), recv.clone(), None)
                }
            }
            other => {
                return raise("MessageNotUnderstood", format!("{} does not understand {selector}", other.type_name()))
            }
        };
        if code.param_count != argc {
            return raise(
                "WrongArgumentCount",
                format!("{} expects {} arguments, got {argc}", method.display_name(), code.param_count),
            );
        }
        if st.frames.len() >= MAX_DEPTH {
            return raise("StackOverflow", format!("call depth exceeds {MAX_DEPTH}"));
        }
        let f = &mut st.frames[fi];
        let args = f.stack.split_off(f.stack.len() - argc);
        f.stack.pop();
        f.pc += 1;
        push_frame(st, method, code, home, receiver, args);
        Ok(Event::Entered)
    }

    fn stream(&self, st: &ExecutionState, v: &Value) -> Exec<(Oid, u64, u64)> {
        let obj = v.as_ref_oid().and_then(|o| st.object(o).map(|obj| (o, obj)));
        match obj {
            Some((oid, obj)) if &*obj.class == FILE_STREAM_CLASS => {
                let Some(tag) = obj.external else {
                    return raise("FileError", "stream is closed");
                };
                let pos = obj.fields.get(1).and_then(Value::as_int).unwrap_or(0).max(0) as u64;
                Ok((oid, tag, pos))
            }
            _ => raise("TypeError", format!("{} is not a file stream", render(st, v))),
        }
    }

    fn array<'s>(&self, st: &'s ExecutionState, v: &Value) -> Exec<(Oid, &'s HeapObject)> {
        match v.as_ref_oid().and_then(|o| st.object(o).map(|obj| (o, obj))) {
            Some((oid, obj)) if &*obj.class == ARRAY_CLASS => Ok((oid, obj)),
            _ => raise("TypeError", format!("{} is not an Array", render(st, v))),
        }
    }

    fn prim(&mut self, st: &mut ExecutionState, prim: Prim, a: &[Value]) -> Exec<Value> {
        match prim {
            Prim::Print => {
                let line = render(st, &a[0]);
                self.host.print(&line);
                Ok(Value::Nil)
            }
            Prim::StrLen => Ok(Value::Int(string(&a[0])?.chars().count() as i64)),
            Prim::Substr => {
                let s = string(&a[0])?;
                let start = int(&a[1])?;
                let len = int(&a[2])?;
                let n = s.chars().count() as i64;
                if start < 0 || len < 0 || start.saturating_add(len) > n {
                    return raise("IndexOutOfBounds", format!("substring {start}+{len} of length {n}"));
                }
                Ok(Value::from(s.chars().skip(start as usize).take(len as usize).collect::<String>()))
            }
            Prim::IndexOf => {
                let s = string(&a[0])?;
                let needle = string(&a[1])?;
                let from = int(&a[2])?.max(0) as usize;
                let chars: Vec<char> = s.chars().collect();
                let pat: Vec<char> = needle.chars().collect();
                let found = (from..=chars.len().saturating_sub(pat.len()))
                    .find(|&i| i + pat.len() <= chars.len() && chars[i..i + pat.len()] == pat[..]);
                Ok(Value::Int(found.map_or(-1, |i| i as i64)))
            }
            Prim::ByteAt => {
                let s = string(&a[0])?;
                let i = int(&a[1])?;
                match usize::try_from(i).ok().and_then(|i| s.chars().nth(i)) {
                    Some(c) => Ok(Value::Int(c as i64)),
                    None => raise("IndexOutOfBounds", format!("index {i} of string")),
                }
            }
            Prim::FromByte => {
                let n = int(&a[0])?;
                match u32::try_from(n).ok().and_then(char::from_u32) {
                    Some(c) => Ok(Value::from(c.to_string())),
                    None => raise("TypeError", format!("{n} is not a character code")),
                }
            }
            Prim::ToStr => Ok(Value::from(render(st, &a[0]))),
            Prim::ParseNumber => parse_number(string(&a[0])?),
            Prim::JsonGet => json_get(string(&a[0])?, string(&a[1])?),
            Prim::Sqrt => {
                let x = float(&a[0])?;
                if x < 0.0 {
                    return raise("DomainError", format!("sqrt of {x}"));
                }
                Ok(Value::Float(x.sqrt()))
            }
            Prim::Floor => match &a[0] {
                Value::Int(i) => Ok(Value::Int(*i)),
                Value::Float(x) if x.is_finite() && x.abs() < 9.2e18 => Ok(Value::Int(x.floor() as i64)),
                Value::Float(x) => raise("ArithmeticOverflow", format!("floor of {x}")),
                other => raise("TypeError", format!("floor of {}", other.type_name())),
            },
            Prim::ClassName => Ok(Value::from(match &a[0] {
                Value::Ref(o) => st.object(*o).map_or("?".to_string(), |obj| obj.class.to_string()),
                other => other.type_name().to_string(),
            })),
            Prim::FileOpen | Prim::RemoteFileOpen => {
                let path = string(&a[0])?.to_string();
                let r = if prim == Prim::FileOpen { self.host.open(&path) } else { self.host.open_remote(&path) };
                let tag = match r {
                    Ok(t) => t,
                    Err(e) => return raise("FileError", e),
                };
                let mut obj = HeapObject::new(FILE_STREAM_CLASS, vec![Value::from(path), Value::Int(0)]);
                obj.external = Some(tag);
                Ok(Value::Ref(st.alloc(obj)))
            }
            Prim::FileRead => {
                let (oid, tag, pos) = self.stream(st, &a[0])?;
                let n = int(&a[1])?;
                if n < 0 {
                    return raise("IndexOutOfBounds", format!("negative read length {n}"));
                }
                let bytes = match self.host.read_at(tag, pos, n as usize) {
                    Ok(b) => b,
                    Err(e) => return raise("FileError", e),
                };
                st.object_mut(oid).expect("stream").fields[1] = Value::Int((pos + bytes.len() as u64) as i64);
                Ok(Value::from(latin1(&bytes)))
            }
            Prim::FileReadAll => {
                let (oid, tag, mut pos) = self.stream(st, &a[0])?;
                let mut out = Vec::new();
                loop {
                    match self.host.read_at(tag, pos, 64 * 1024) {
                        Ok(b) if b.is_empty() => break,
                        Ok(b) => {
                            pos += b.len() as u64;
                            out.extend_from_slice(&b);
                        }
                        Err(e) => return raise("FileError", e),
                    }
                }
                st.object_mut(oid).expect("stream").fields[1] = Value::Int(pos as i64);
                Ok(Value::from(latin1(&out)))
            }
            Prim::FileAtEnd => {
                let (_, tag, pos) = self.stream(st, &a[0])?;
                match self.host.at_end(tag, pos) {
                    Ok(b) => Ok(Value::Bool(b)),
                    Err(e) => raise("FileError", e),
                }
            }
            Prim::FileClose => {
                let (oid, tag, _) = self.stream(st, &a[0])?;
                self.host.close(tag);
                st.object_mut(oid).expect("stream").external = None;
                Ok(Value::Nil)
            }
            Prim::ArrayNew => {
                let n = int(&a[0])?;
                if !(0..=1 << 24).contains(&n) {
                    return raise("IndexOutOfBounds", format!("array size {n}"));
                }
                Ok(Value::Ref(st.alloc(HeapObject::new(ARRAY_CLASS, vec![Value::Nil; n as usize]))))
            }
            Prim::ArrayAt => {
                let (_, obj) = self.array(st, &a[0])?;
                let i = int(&a[1])?;
                match usize::try_from(i).ok().and_then(|i| obj.fields.get(i)) {
                    Some(v) => Ok(v.clone()),
                    None => raise("IndexOutOfBounds", format!("index {i} of Array({})", obj.fields.len())),
                }
            }
            Prim::ArrayAtPut => {
                let (oid, obj) = self.array(st, &a[0])?;
                let i = int(&a[1])?;
                let len = obj.fields.len();
                match usize::try_from(i).ok().filter(|&i| i < len) {
                    Some(i) => {
                        st.object_mut(oid).expect("array").fields[i] = a[2].clone();
                        Ok(a[2].clone())
                    }
                    None => raise("IndexOutOfBounds", format!("index {i} of Array({len})")),
                }
            }
            Prim::ArraySize => Ok(Value::Int(self.array(st, &a[0])?.1.fields.len() as i64)),
        }
    }
}

fn advance(st: &mut ExecutionState) -> Exec<Event> {
    st.frames.last_mut().expect("frame").pc += 1;
    Ok(Event::Normal)
}

fn peek(f: &Frame, depth: usize) -> Exec<&Value> {
    match f.stack.len().checked_sub(depth + 1) {
        Some(i) => Ok(&f.stack[i]),
        None => raise("VMError", "operand stack underflow"),
    }
}

fn local(f: &Frame, slot: u16) -> Exec<&Value> {
    match f.locals.get(slot as usize) {
        Some(v) => Ok(v),
        None => raise("VMError", format!("local slot {slot} out of range")),
    }
}

/// Index of the frame `depth` steps up the home chain from frame `fi`.
fn outer_frame(st: &ExecutionState, fi: usize, depth: u8) -> Exec<usize> {
    let mut i = fi;
    for _ in 0..depth {
        match st.frames[i].home.and_then(|h| st.frame_by_id(h)) {
            Some(h) => i = h,
            None => return raise("BlockContextDead", "an enclosing method has returned"),
        }
    }
    Ok(i)
}

fn string(v: &Value) -> Exec<&str> {
    match v {
        Value::Str(s) => Ok(s),
        other => raise("TypeError", format!("expected string, got {}", other.type_name())),
    }
}

fn int(v: &Value) -> Exec<i64> {
    match v {
        Value::Int(i) => Ok(*i),
        other => raise("TypeError", format!("expected int, got {}", other.type_name())),
    }
}

fn float(v: &Value) -> Exec<f64> {
    match v {
        Value::Int(i) => Ok(*i as f64),
        Value::Float(x) => Ok(*x),
        other => raise("TypeError", format!("expected number, got {}", other.type_name())),
    }
}

fn parse_number(s: &str) -> Exec<Value> {
    let t = s.trim();
    if let Ok(i) = t.parse::<i64>() {
        return Ok(Value::Int(i));
    }
    match t.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(Value::Float(x)),
        _ => raise("NumberParseError", format!("cannot parse {t:?} as a number")),
    }
}

fn json_get(doc: &str, path: &str) -> Exec<Value> {
    let root: serde_json::Value = match serde_json::from_str(doc) {
        Ok(v) => v,
        Err(e) => return raise("JsonError", e.to_string()),
    };
    let mut cur = &root;
    for part in path.split('.').filter(|p| !p.is_empty()) {
        let next = match cur {
            serde_json::Value::Object(m) => m.get(part),
            serde_json::Value::Array(xs) => part.parse::<usize>().ok().and_then(|i| xs.get(i)),
            _ => None,
        };
        match next {
            Some(n) => cur = n,
            None => return Ok(Value::Nil),
        }
    }
    Ok(match cur {
        serde_json::Value::Null => Value::Nil,
        serde_json::Value::Bool(b) => Value::Bool(*b),
        serde_json::Value::Number(n) => match n.as_i64() {
            Some(i) => Value::Int(i),
            None => Value::Float(n.as_f64().unwrap_or(f64::NAN)),
        },
        serde_json::Value::String(s) => Value::from(s.as_str()),
        other => Value::from(other.to_string()),
    })
}

fn binary(st: &ExecutionState, op: BinOp, a: &Value, b: &Value) -> Exec<Value> {
    use Value::{Float, Int, Str};
    let overflow = || raise("ArithmeticOverflow", format!("{a} {} {b} overflows", op.symbol()));
    match op {
        BinOp::Eq => return Ok(Value::Bool(a.guest_eq(b))),
        BinOp::Ne => return Ok(Value::Bool(!a.guest_eq(b))),
        BinOp::Add if matches!(a, Str(_)) || matches!(b, Str(_)) => {
            return Ok(Value::from(render(st, a) + &render(st, b)))
        }
        BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
            let ord = match (a, b) {
                (Int(x), Int(y)) => Some(x.cmp(y)),
                (Str(x), Str(y)) => Some(x.cmp(y)),
                (Int(_) | Float(_), Int(_) | Float(_)) => float(a)?.partial_cmp(&float(b)?),
                _ => {
                    return raise(
                        "TypeError",
                        format!("cannot compare {} {} {}", a.type_name(), op.symbol(), b.type_name()),
                    )
                }
            };
            let r = match ord {
                None => false,
                Some(o) => match op {
                    BinOp::Lt => o == Ordering::Less,
                    BinOp::Le => o != Ordering::Greater,
                    BinOp::Gt => o == Ordering::Greater,
                    _ => o != Ordering::Less,
                },
            };
            return Ok(Value::Bool(r));
        }
        _ => {}
    }
    match (a, b) {
        (Int(x), Int(y)) => {
            let r = match op {
                BinOp::Add => x.checked_add(*y),
                BinOp::Sub => x.checked_sub(*y),
                BinOp::Mul => x.checked_mul(*y),
                BinOp::Div | BinOp::Mod if *y == 0 => return raise("DivideByZero", format!("{x} {} 0", op.symbol())),
                BinOp::Div => x.checked_div(*y),
                BinOp::Mod => x.checked_rem_euclid(*y),
                _ => unreachable!(),
            };
            r.map(Int).map_or_else(overflow, Ok)
        }
        (Int(_) | Float(_), Int(_) | Float(_)) => {
            let (x, y) = (float(a)?, float(b)?);
            let r = match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div | BinOp::Mod if y == 0.0 => {
                    return raise("DivideByZero", format!("{a} {} {b}", op.symbol()))
                }
                BinOp::Div => x / y,
                BinOp::Mod => x.rem_euclid(y),
                _ => unreachable!(),
            };
            Ok(Float(r))
        }
        _ => raise(
            "TypeError",
            format!("unsupported operands {} {} {}", a.type_name(), op.symbol(), b.type_name()),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::host::NoFiles;

    fn run(src: &str, class: &str, sel: &str, args: TaskArgs) -> (ExecutionState, Vec<String>) {
        let img = ProgramImage::load(src).unwrap();
        let mut st = spawn(&img, class, sel, &args).unwrap();
        let mut host = NoFiles::default();
        Vm::new(&img, &mut host).run(&mut st).unwrap();
        (st, host.output)
    }

    #[test]
    fn arithmetic_and_loops() {
        let src = "class T { method go(n) { var i, s; i := 0; s := 0; while (i < n) { s := s + i; i := i + 1; } return s; } }";
        let (st, _) = run(src, "T", "go", TaskArgs::scalars([Value::Int(10)]));
        assert_eq!(st.status, Status::Completed);
        assert_eq!(st.result, Some(Value::Int(45)));
    }

    #[test]
    fn blocks_capture_and_mutate_home_locals() {
        let src = "class T {
            method each(n, blk) { var i; i := 0; while (i < n) { blk.value(i); i := i + 1; } }
            method go() { var total; total := 0; self.each(4, fn(x) { total := total + x; }); return total; }
        }";
        let (st, _) = run(src, "T", "go", TaskArgs::new());
        assert_eq!(st.result, Some(Value::Int(6)));
    }

    #[test]
    fn halt_then_resume() {
        let src = "class T { method go() { @print(\"a\"); halt; @print(\"b\"); return 1; } }";
        let img = ProgramImage::load(src).unwrap();
        let mut st = spawn(&img, "T", "go", &TaskArgs::new()).unwrap();
        let mut host = NoFiles::default();
        let mut vm = Vm::new(&img, &mut host);
        assert_eq!(vm.run(&mut st).unwrap(), Status::SuspendedOnHalt);
        assert_eq!(vm.run(&mut st).unwrap(), Status::Completed);
        assert_eq!(host.output, vec!["a", "b"]);
    }

    #[test]
    fn exception_suspends_at_faulting_instruction() {
        let src = "class T { method go(s) { return @parseNumber(s) + 1; } }";
        let img = ProgramImage::load(src).unwrap();
        let mut st = spawn(&img, "T", "go", &TaskArgs::scalars([Value::from("nan")])).unwrap();
        let mut host = NoFiles::default();
        let mut vm = Vm::new(&img, &mut host);
        assert_eq!(vm.run(&mut st).unwrap(), Status::SuspendedOnException);
        let exc = st.exception.clone().unwrap();
        assert_eq!(exc.class_name, "NumberParseError");
        // Resuming unchanged re-executes the primitive and raises again.
        assert_eq!(vm.step(&mut st, StepOp::Into).unwrap(), Status::SuspendedOnException);
        assert_eq!(st.exception, Some(exc));
    }

    #[test]
    fn over_skips_callee_and_into_enters() {
        let src = "class T { method f() { return 2; } method go() { var x; halt; x := self.f(); return x; } }";
        let img = ProgramImage::load(src).unwrap();
        let mut host = NoFiles::default();
        let mut vm = Vm::new(&img, &mut host);
        let mut st = spawn(&img, "T", "go", &TaskArgs::new()).unwrap();
        vm.run(&mut st).unwrap();
        let mut a = st.clone();
        vm.step(&mut a, StepOp::Into).unwrap(); // PushSelf
        vm.step(&mut a, StepOp::Into).unwrap(); // Send
        assert_eq!(a.depth(), 2);
        let mut b = st.clone();
        vm.step(&mut b, StepOp::Into).unwrap();
        vm.step(&mut b, StepOp::Over).unwrap();
        assert_eq!(b.depth(), 1);
        assert_eq!(b.top().unwrap().stack, vec![Value::Int(2)]);
    }

    #[test]
    fn restart_uses_entry_arguments() {
        let src = "class T { method go(n) { n := n + 1; halt; return n; } }";
        let img = ProgramImage::load(src).unwrap();
        let mut host = NoFiles::default();
        let mut vm = Vm::new(&img, &mut host);
        let mut st = spawn(&img, "T", "go", &TaskArgs::scalars([Value::Int(5)])).unwrap();
        vm.run(&mut st).unwrap();
        assert_eq!(st.top().unwrap().locals[0], Value::Int(6));
        vm.step(&mut st, StepOp::Restart(0)).unwrap();
        assert_eq!(st.top().unwrap().locals[0], Value::Int(5));
        assert_eq!(st.top().unwrap().pc, 0);
        assert_eq!(st.status, Status::SuspendedOnStep);
    }

    #[test]
    fn evaluate_sees_locals_and_leaves_original_untouched() {
        let src = "class T { var count; method go(n) { var k; k := n * 2; count := 1; halt; return k; } }";
        let img = ProgramImage::load(src).unwrap();
        let mut host = NoFiles::default();
        let mut vm = Vm::new(&img, &mut host);
        let mut st = spawn(&img, "T", "go", &TaskArgs::scalars([Value::Int(4)])).unwrap();
        vm.run(&mut st).unwrap();
        let before = st.fingerprint();
        let out = vm.evaluate(&st, 0, "k + n + count").unwrap();
        assert_eq!(out.value, Value::Int(13));
        assert_eq!(out.state.fingerprint(), before);
        let out = vm.evaluate(&st, 0, "count := 99").unwrap();
        assert_ne!(out.state.fingerprint(), before);
        assert_eq!(st.fingerprint(), before);
        assert!(matches!(vm.evaluate(&st, 0, "1 / 0"), Err(EvalError::Guest(_))));
        assert!(matches!(vm.evaluate(&st, 0, "zork"), Err(EvalError::Parse(_))));
    }

    #[test]
    fn through_stops_in_block_of_current_frame() {
        let src = "class T {
            method each(blk) { blk.value(1); return 0; }
            method go() { var t; halt; self.each(fn(x) { t := x; }); return t; }
        }";
        let img = ProgramImage::load(src).unwrap();
        let mut host = NoFiles::default();
        let mut vm = Vm::new(&img, &mut host);
        let mut st = spawn(&img, "T", "go", &TaskArgs::new()).unwrap();
        vm.run(&mut st).unwrap();
        let mut through = st.clone();
        let mut over = st.clone();
        for _ in 0..3 {
            vm.step(&mut through, StepOp::Through).unwrap();
            vm.step(&mut over, StepOp::Over).unwrap();
        }
        assert!(through.top().unwrap().method.is_block());
        assert_eq!(over.depth(), 1);
    }

    #[test]
    fn runtime_errors_raise() {
        for (body, class) in [
            ("return 1 / 0;", "DivideByZero"),
            ("return 9223372036854775807 + 1;", "ArithmeticOverflow"),
            ("return 3.foo();", "MessageNotUnderstood"),
            ("return @parseNumber(\"inf\");", "NumberParseError"),
            ("raise Custom(\"x\");", "Custom"),
        ] {
            let src = format!("class T {{ method go() {{ {body} }} }}");
            let (st, _) = run(&src, "T", "go", TaskArgs::new());
            assert_eq!(st.exception.unwrap().class_name, class, "{body}");
        }
    }

    #[test]
    fn steps_on_completed_state_are_rejected() {
        let (mut st, _) = run("class T { method go() { return 1; } }", "T", "go", TaskArgs::new());
        let img = ProgramImage::load("class T { method go() { return 1; } }").unwrap();
        let mut host = NoFiles::default();
        let mut vm = Vm::new(&img, &mut host);
        assert!(matches!(vm.step(&mut st, StepOp::Into), Err(StepError::StepAtCompletedState(_))));
    }
}
