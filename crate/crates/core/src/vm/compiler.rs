//! AST to bytecode.

use std::sync::Arc;

use super::bytecode::{CodeUnit, Instr, Prim};
use super::error::ParseError;
use super::parser::{Expr, ExprKind, Literal, Stmt, StmtKind};

/// Names visible to code compiled inside a class.
pub struct ClassScope<'a> {
    pub class: &'a str,
    pub ivars: &'a [String],
    pub class_vars: &'a [String],
}

/// Compiles a method body. `outer` lists the local names of enclosing code
/// units, innermost first (empty for methods).
pub fn compile_body(
    params: &[String],
    body: &[Stmt],
    outer: &[Vec<String>],
    scope: &ClassScope<'_>,
    line: u32,
) -> Result<CodeUnit, ParseError> {
    let mut c = UnitCompiler::new(params, body, outer, scope, line)?;
    c.stmts(body)?;
    c.emit(Instr::PushNil, c.end_line);
    c.emit(Instr::Return, c.end_line);
    Ok(c.finish())
}

/// Compiles a debugger expression. The last expression statement's value is
/// returned from the unit.
pub fn compile_eval(
    body: &[Stmt],
    outer: &[Vec<String>],
    scope: &ClassScope<'_>,
) -> Result<CodeUnit, ParseError> {
    let mut c = UnitCompiler::new(&[], body, outer, scope, 1)?;
    match body.split_last() {
        Some((Stmt { kind: StmtKind::Expr(e), line, .. }, init)) => {
            c.stmts(init)?;
            c.expr(e)?;
            c.emit(Instr::Return, *line);
        }
        _ => {
            c.stmts(body)?;
            c.emit(Instr::PushNil, c.end_line);
            c.emit(Instr::Return, c.end_line);
        }
    }
    Ok(c.finish())
}

struct UnitCompiler<'a, 's> {
    locals: Vec<String>,
    param_count: usize,
    outer: &'a [Vec<String>],
    scope: &'a ClassScope<'s>,
    instrs: Vec<Instr>,
    lines: Vec<u32>,
    blocks: Vec<Arc<CodeUnit>>,
    end_line: u32,
}

enum Resolved {
    Local(u16),
    Outer(u8, u16),
    Ivar,
    ClassVar,
}

fn collect_temps(body: &[Stmt], out: &mut Vec<(String, u32, u32)>) {
    for s in body {
        match &s.kind {
            StmtKind::Var(names) => out.extend(names.iter().map(|n| (n.clone(), s.line, s.col))),
            StmtKind::If { then, els, .. } => {
                collect_temps(then, out);
                if let Some(e) = els {
                    collect_temps(e, out);
                }
            }
            StmtKind::While { body, .. } => collect_temps(body, out),
            _ => {}
        }
    }
}

fn last_line(body: &[Stmt], fallback: u32) -> u32 {
    body.last().map_or(fallback, |s| s.line)
}

impl<'a, 's> UnitCompiler<'a, 's> {
    fn new(
        params: &[String],
        body: &[Stmt],
        outer: &'a [Vec<String>],
        scope: &'a ClassScope<'s>,
        line: u32,
    ) -> Result<Self, ParseError> {
        let mut locals: Vec<String> = Vec::new();
        for p in params {
            if locals.contains(p) {
                return Err(ParseError { line, col: 1, message: format!("duplicate parameter {p}") });
            }
            locals.push(p.clone());
        }
        let mut temps = Vec::new();
        collect_temps(body, &mut temps);
        for (name, l, col) in temps {
            if locals.contains(&name) {
                return Err(ParseError { line: l, col, message: format!("duplicate variable {name}") });
            }
            locals.push(name);
        }
        Ok(UnitCompiler {
            locals,
            param_count: params.len(),
            outer,
            scope,
            instrs: vec![],
            lines: vec![],
            blocks: vec![],
            end_line: last_line(body, line),
        })
    }

    fn finish(self) -> CodeUnit {
        CodeUnit {
            param_count: self.param_count,
            local_names: self.locals,
            instrs: self.instrs,
            lines: self.lines,
            blocks: self.blocks,
        }
    }

    fn emit(&mut self, i: Instr, line: u32) -> usize {
        self.instrs.push(i);
        self.lines.push(line);
        self.instrs.len() - 1
    }

    fn here(&self) -> u32 {
        self.instrs.len() as u32
    }

    fn patch(&mut self, at: usize, target: u32) {
        match &mut self.instrs[at] {
            Instr::Jump(t) | Instr::JumpIfFalse(t) | Instr::JumpIfFalseKeep(t) | Instr::JumpIfTrueKeep(t) => {
                *t = target
            }
            other => unreachable!("patching non-branch {other:?}"),
        }
    }

    fn resolve(&self, name: &str, line: u32, col: u32) -> Result<Resolved, ParseError> {
        if let Some(i) = self.locals.iter().position(|n| n == name) {
            return Ok(Resolved::Local(i as u16));
        }
        for (d, names) in self.outer.iter().enumerate() {
            if let Some(i) = names.iter().position(|n| n == name) {
                return Ok(Resolved::Outer((d + 1) as u8, i as u16));
            }
        }
        if self.scope.ivars.iter().any(|n| n == name) {
            return Ok(Resolved::Ivar);
        }
        if self.scope.class_vars.iter().any(|n| n == name) {
            return Ok(Resolved::ClassVar);
        }
        Err(ParseError { line, col, message: format!("unknown variable {name}") })
    }

    fn stmts(&mut self, body: &[Stmt]) -> Result<(), ParseError> {
        body.iter().try_for_each(|s| self.stmt(s))
    }

    fn stmt(&mut self, s: &Stmt) -> Result<(), ParseError> {
        let line = s.line;
        match &s.kind {
            StmtKind::Var(_) => {}
            StmtKind::Expr(e) => {
                self.expr(e)?;
                self.emit(Instr::Pop, line);
            }
            StmtKind::If { cond, then, els } => {
                self.expr(cond)?;
                let jf = self.emit(Instr::JumpIfFalse(0), line);
                self.stmts(then)?;
                match els {
                    Some(els) => {
                        let j = self.emit(Instr::Jump(0), last_line(then, line));
                        let t = self.here();
                        self.patch(jf, t);
                        self.stmts(els)?;
                        let t = self.here();
                        self.patch(j, t);
                    }
                    None => {
                        let t = self.here();
                        self.patch(jf, t);
                    }
                }
            }
            StmtKind::While { cond, body } => {
                let start = self.here();
                self.expr(cond)?;
                let jf = self.emit(Instr::JumpIfFalse(0), line);
                self.stmts(body)?;
                self.emit(Instr::Jump(start), line);
                let t = self.here();
                self.patch(jf, t);
            }
            StmtKind::Return(v) => {
                match v {
                    Some(e) => self.expr(e)?,
                    None => {
                        self.emit(Instr::PushNil, line);
                    }
                }
                self.emit(Instr::Return, line);
            }
            StmtKind::Halt => {
                self.emit(Instr::Halt, line);
            }
            StmtKind::Raise { class, message } => {
                match message {
                    Some(e) => self.expr(e)?,
                    None => {
                        self.emit(Instr::PushStr(Arc::from("")), line);
                    }
                }
                self.emit(Instr::Raise { class: Arc::from(class.as_str()) }, line);
            }
        }
        Ok(())
    }

    fn literal(&mut self, lit: &Literal, line: u32) {
        let i = match lit {
            Literal::Nil => Instr::PushNil,
            Literal::Bool(true) => Instr::PushTrue,
            Literal::Bool(false) => Instr::PushFalse,
            Literal::Int(i) => Instr::PushInt(*i),
            Literal::Float(f) => Instr::PushFloat(*f),
            Literal::Str(s) => Instr::PushStr(Arc::from(s.as_str())),
        };
        self.emit(i, line);
    }

    fn expr(&mut self, e: &Expr) -> Result<(), ParseError> {
        let line = e.line;
        match &e.kind {
            ExprKind::Lit(l) => self.literal(l, line),
            ExprKind::SelfRef => {
                self.emit(Instr::PushSelf, line);
            }
            ExprKind::Var(name) => {
                let i = match self.resolve(name, e.line, e.col)? {
                    Resolved::Local(s) => Instr::LoadLocal(s),
                    Resolved::Outer(depth, slot) => Instr::LoadOuter { depth, slot },
                    Resolved::Ivar => Instr::LoadIvar(Arc::from(name.as_str())),
                    Resolved::ClassVar => {
                        Instr::LoadClassVar { class: Arc::from(self.scope.class), name: Arc::from(name.as_str()) }
                    }
                };
                self.emit(i, line);
            }
            ExprKind::Assign(name, value) => {
                let target = self.resolve(name, e.line, e.col)?;
                self.expr(value)?;
                let i = match target {
                    Resolved::Local(s) => Instr::StoreLocal(s),
                    Resolved::Outer(depth, slot) => Instr::StoreOuter { depth, slot },
                    Resolved::Ivar => Instr::StoreIvar(Arc::from(name.as_str())),
                    Resolved::ClassVar => {
                        Instr::StoreClassVar { class: Arc::from(self.scope.class), name: Arc::from(name.as_str()) }
                    }
                };
                self.emit(i, line);
            }
            ExprKind::Binary(op, l, r) => {
                self.expr(l)?;
                self.expr(r)?;
                self.emit(Instr::Binary(*op), line);
            }
            ExprKind::And(l, r) => {
                self.expr(l)?;
                let j = self.emit(Instr::JumpIfFalseKeep(0), line);
                self.expr(r)?;
                let t = self.here();
                self.patch(j, t);
            }
            ExprKind::Or(l, r) => {
                self.expr(l)?;
                let j = self.emit(Instr::JumpIfTrueKeep(0), line);
                self.expr(r)?;
                let t = self.here();
                self.patch(j, t);
            }
            ExprKind::Not(x) => {
                self.expr(x)?;
                self.emit(Instr::Not, line);
            }
            ExprKind::Neg(x) => {
                self.expr(x)?;
                self.emit(Instr::Neg, line);
            }
            ExprKind::Send { receiver, selector, args } => {
                self.expr(receiver)?;
                for a in args {
                    self.expr(a)?;
                }
                self.emit(Instr::Send { selector: Arc::from(selector.as_str()), argc: args.len() as u8 }, line);
            }
            ExprKind::New { class, args } => {
                self.emit(Instr::New { class: Arc::from(class.as_str()) }, line);
                if !args.is_empty() {
                    self.emit(Instr::Dup, line);
                    for a in args {
                        self.expr(a)?;
                    }
                    self.emit(Instr::Send { selector: Arc::from("init"), argc: args.len() as u8 }, line);
                    self.emit(Instr::Pop, line);
                }
            }
            ExprKind::Prim { name, args } => {
                let prim = Prim::from_name(name).ok_or_else(|| ParseError {
                    line: e.line,
                    col: e.col,
                    message: format!("unknown primitive @{name}"),
                })?;
                if prim.arity() != args.len() {
                    return Err(ParseError {
                        line: e.line,
                        col: e.col,
                        message: format!("@{name} takes {} arguments, got {}", prim.arity(), args.len()),
                    });
                }
                for a in args {
                    self.expr(a)?;
                }
                self.emit(Instr::Prim { prim, argc: args.len() as u8 }, line);
            }
            ExprKind::Block { params, body } => {
                let mut chain = Vec::with_capacity(self.outer.len() + 1);
                chain.push(self.locals.clone());
                chain.extend(self.outer.iter().cloned());
                let unit = compile_body(params, body, &chain, self.scope, line)?;
                self.blocks.push(Arc::new(unit));
                self.emit(Instr::MakeBlock((self.blocks.len() - 1) as u16), line);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::parser::parse_method;

    fn compile(src: &str, ivars: &[&str]) -> Result<CodeUnit, ParseError> {
        let m = parse_method(src).unwrap();
        let ivars: Vec<String> = ivars.iter().map(|s| s.to_string()).collect();
        let scope = ClassScope { class: "T", ivars: &ivars, class_vars: &[] };
        compile_body(&m.params, &m.body, &[], &scope, m.line)
    }

    #[test]
    fn hoists_temps_and_validates() {
        let u = compile("method f(a) { var x; if (a) { var y; y := 1; } x := 2; return x; }", &[]).unwrap();
        assert_eq!(u.local_names, vec!["a", "x", "y"]);
        assert_eq!(u.param_count, 1);
        u.validate().unwrap();
        assert_eq!(u.instrs.last(), Some(&Instr::Return));
    }

    #[test]
    fn unknown_variable_is_an_error() {
        let e = compile("method f() { return zork; }", &[]).unwrap_err();
        assert!(e.message.contains("zork"));
    }

    #[test]
    fn blocks_resolve_outer_locals() {
        let u = compile("method f(xs) { var total; total := 0; xs.each(fn(x) { total := total + x + count; }); }", &[
            "count",
        ])
        .unwrap();
        let b = &u.blocks[0];
        assert!(b.instrs.contains(&Instr::LoadOuter { depth: 1, slot: 1 }));
        assert!(b.instrs.contains(&Instr::LoadIvar(Arc::from("count"))));
    }

    #[test]
    fn primitive_arity_checked() {
        assert!(compile("method f() { return @strLen(1, 2); }", &[]).is_err());
        assert!(compile("method f() { return @nope(1); }", &[]).is_err());
        assert!(compile("method f() { return @remoteFileOpen(\"x\"); }", &[]).is_err());
    }
}
