//! Recursive-descent parser for the guest language. See `docs/guest-language.md`.

use super::bytecode::BinOp;
use super::error::ParseError;
use super::lexer::{tokenize, Tok, Token};

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Nil,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAst {
    pub name: String,
    pub ivars: Vec<String>,
    pub class_vars: Vec<(String, Literal)>,
    pub methods: Vec<MethodAst>,
    pub source: String,
    pub line: u32,
    pub col: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodAst {
    pub selector: String,
    pub params: Vec<String>,
    pub body: Vec<Stmt>,
    pub source: String,
    pub line: u32,
    pub col: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stmt {
    pub kind: StmtKind,
    pub line: u32,
    pub col: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StmtKind {
    Var(Vec<String>),
    If { cond: Expr, then: Vec<Stmt>, els: Option<Vec<Stmt>> },
    While { cond: Expr, body: Vec<Stmt> },
    Return(Option<Expr>),
    Halt,
    Raise { class: String, message: Option<Expr> },
    Expr(Expr),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    pub kind: ExprKind,
    pub line: u32,
    pub col: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprKind {
    Lit(Literal),
    SelfRef,
    Var(String),
    Assign(String, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Not(Box<Expr>),
    Neg(Box<Expr>),
    Send { receiver: Box<Expr>, selector: String, args: Vec<Expr> },
    New { class: String, args: Vec<Expr> },
    Prim { name: String, args: Vec<Expr> },
    Block { params: Vec<String>, body: Vec<Stmt> },
}

const KEYWORDS: &[&str] = &[
    "class", "var", "classvar", "method", "if", "else", "while", "return", "halt", "raise", "true", "false", "nil",
    "self", "new", "fn",
];

pub fn parse_program(src: &str) -> Result<Vec<ClassAst>, ParseError> {
    let mut p = Parser::new(src)?;
    let mut classes = Vec::new();
    while !p.at(&Tok::Eof) {
        classes.push(p.class_decl()?);
    }
    Ok(classes)
}

/// Parses a single `method name(args) { ... }` definition.
pub fn parse_method(src: &str) -> Result<MethodAst, ParseError> {
    let mut p = Parser::new(src)?;
    let m = p.method_decl()?;
    p.expect(&Tok::Eof)?;
    Ok(m)
}

/// Parses a single class declaration.
pub fn parse_class(src: &str) -> Result<ClassAst, ParseError> {
    let mut p = Parser::new(src)?;
    let c = p.class_decl()?;
    p.expect(&Tok::Eof)?;
    Ok(c)
}

/// Parses a debugger expression: a statement list whose trailing `;` is
/// optional. The value of the last expression statement is the result.
pub fn parse_eval(src: &str) -> Result<Vec<Stmt>, ParseError> {
    let mut p = Parser::new(src)?;
    let mut stmts = Vec::new();
    while !p.at(&Tok::Eof) {
        let s = p.statement(true)?;
        stmts.push(s);
    }
    Ok(stmts)
}

struct Parser<'a> {
    src: &'a str,
    toks: Vec<Token>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Result<Self, ParseError> {
        Ok(Parser { src, toks: tokenize(src)?, pos: 0 })
    }

    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn peek_at(&self, n: usize) -> &Tok {
        &self.toks[(self.pos + n).min(self.toks.len() - 1)].tok
    }

    fn at(&self, t: &Tok) -> bool {
        &self.peek().tok == t
    }

    fn at_kw(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s == kw)
    }

    fn advance(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn err_here(&self, msg: impl Into<String>) -> ParseError {
        let t = self.peek();
        ParseError { line: t.line, col: t.col, message: msg.into() }
    }

    fn expect(&mut self, t: &Tok) -> Result<Token, ParseError> {
        if self.at(t) {
            Ok(self.advance())
        } else {
            Err(self.err_here(format!("expected {}, found {}", describe(t), describe(&self.peek().tok))))
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<Token, ParseError> {
        if self.at_kw(kw) {
            Ok(self.advance())
        } else {
            Err(self.err_here(format!("expected '{kw}', found {}", describe(&self.peek().tok))))
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match &self.peek().tok {
            Tok::Ident(s) if !KEYWORDS.contains(&s.as_str()) => {
                let s = s.clone();
                self.advance();
                Ok(s)
            }
            other => Err(self.err_here(format!("expected identifier, found {}", describe(other)))),
        }
    }

    fn ident_list(&mut self) -> Result<Vec<String>, ParseError> {
        let mut names = vec![self.ident()?];
        while self.at(&Tok::Comma) {
            self.advance();
            names.push(self.ident()?);
        }
        Ok(names)
    }

    fn class_decl(&mut self) -> Result<ClassAst, ParseError> {
        let start = self.expect_kw("class")?;
        let name = self.ident()?;
        self.expect(&Tok::LBrace)?;
        let mut class = ClassAst {
            name,
            ivars: vec![],
            class_vars: vec![],
            methods: vec![],
            source: String::new(),
            line: start.line,
            col: start.col,
        };
        while !self.at(&Tok::RBrace) {
            if self.at_kw("var") {
                self.advance();
                class.ivars.extend(self.ident_list()?);
                self.expect(&Tok::Semi)?;
            } else if self.at_kw("classvar") {
                self.advance();
                loop {
                    let name = self.ident()?;
                    let init = if self.at(&Tok::Eq) {
                        self.advance();
                        self.literal()?
                    } else {
                        Literal::Nil
                    };
                    class.class_vars.push((name, init));
                    if !self.at(&Tok::Comma) {
                        break;
                    }
                    self.advance();
                }
                self.expect(&Tok::Semi)?;
            } else if self.at_kw("method") {
                class.methods.push(self.method_decl()?);
            } else {
                return Err(self.err_here(format!(
                    "expected 'var', 'classvar' or 'method', found {}",
                    describe(&self.peek().tok)
                )));
            }
        }
        let end = self.expect(&Tok::RBrace)?;
        class.source = self.src[start.offset..end.offset + 1].to_string();
        Ok(class)
    }

    fn literal(&mut self) -> Result<Literal, ParseError> {
        let neg = if self.at(&Tok::Minus) {
            self.advance();
            true
        } else {
            false
        };
        let t = self.advance();
        let lit = match t.tok {
            Tok::Int(i) => Literal::Int(if neg { -i } else { i }),
            Tok::Float(f) => Literal::Float(if neg { -f } else { f }),
            Tok::Str(s) if !neg => Literal::Str(s),
            Tok::Ident(ref s) if !neg && s == "nil" => Literal::Nil,
            Tok::Ident(ref s) if !neg && s == "true" => Literal::Bool(true),
            Tok::Ident(ref s) if !neg && s == "false" => Literal::Bool(false),
            other => {
                return Err(ParseError {
                    line: t.line,
                    col: t.col,
                    message: format!("expected literal, found {}", describe(&other)),
                })
            }
        };
        Ok(lit)
    }

    fn method_decl(&mut self) -> Result<MethodAst, ParseError> {
        let start = self.expect_kw("method")?;
        let selector = self.ident()?;
        let params = self.param_list()?;
        let (body, end) = self.block_body()?;
        Ok(MethodAst {
            selector,
            params,
            body,
            source: self.src[start.offset..end.offset + 1].to_string(),
            line: start.line,
            col: start.col,
        })
    }

    fn param_list(&mut self) -> Result<Vec<String>, ParseError> {
        self.expect(&Tok::LParen)?;
        let params = if self.at(&Tok::RParen) { vec![] } else { self.ident_list()? };
        self.expect(&Tok::RParen)?;
        Ok(params)
    }

    /// Parses `{ stmt* }`, returning the statements and the closing brace.
    fn block_body(&mut self) -> Result<(Vec<Stmt>, Token), ParseError> {
        self.expect(&Tok::LBrace)?;
        let mut stmts = Vec::new();
        while !self.at(&Tok::RBrace) {
            if self.at(&Tok::Eof) {
                return Err(self.err_here("unexpected end of input, expected '}'"));
            }
            stmts.push(self.statement(false)?);
        }
        let end = self.advance();
        Ok((stmts, end))
    }

    fn end_stmt(&mut self, lenient: bool) -> Result<(), ParseError> {
        if lenient && self.at(&Tok::Eof) {
            return Ok(());
        }
        self.expect(&Tok::Semi).map(|_| ())
    }

    fn statement(&mut self, lenient: bool) -> Result<Stmt, ParseError> {
        let t = self.peek().clone();
        let (line, col) = (t.line, t.col);
        let kind = match &t.tok {
            Tok::Ident(kw) if kw == "var" => {
                self.advance();
                let names = self.ident_list()?;
                self.end_stmt(lenient)?;
                StmtKind::Var(names)
            }
            Tok::Ident(kw) if kw == "if" => return self.if_stmt(),
            Tok::Ident(kw) if kw == "while" => {
                self.advance();
                self.expect(&Tok::LParen)?;
                let cond = self.expr()?;
                self.expect(&Tok::RParen)?;
                let (body, _) = self.block_body()?;
                StmtKind::While { cond, body }
            }
            Tok::Ident(kw) if kw == "return" => {
                self.advance();
                let value = if self.at(&Tok::Semi) || (lenient && self.at(&Tok::Eof)) {
                    None
                } else {
                    Some(self.expr()?)
                };
                self.end_stmt(lenient)?;
                StmtKind::Return(value)
            }
            Tok::Ident(kw) if kw == "halt" => {
                self.advance();
                self.end_stmt(lenient)?;
                StmtKind::Halt
            }
            Tok::Ident(kw) if kw == "raise" => {
                self.advance();
                let class = self.ident()?;
                self.expect(&Tok::LParen)?;
                let message = if self.at(&Tok::RParen) { None } else { Some(self.expr()?) };
                self.expect(&Tok::RParen)?;
                self.end_stmt(lenient)?;
                StmtKind::Raise { class, message }
            }
            _ => {
                let e = self.expr()?;
                self.end_stmt(lenient)?;
                StmtKind::Expr(e)
            }
        };
        Ok(Stmt { kind, line, col })
    }

    fn if_stmt(&mut self) -> Result<Stmt, ParseError> {
        let t = self.expect_kw("if")?;
        self.expect(&Tok::LParen)?;
        let cond = self.expr()?;
        self.expect(&Tok::RParen)?;
        let (then, _) = self.block_body()?;
        let els = if self.at_kw("else") {
            self.advance();
            if self.at_kw("if") {
                Some(vec![self.if_stmt()?])
            } else {
                Some(self.block_body()?.0)
            }
        } else {
            None
        };
        Ok(Stmt { kind: StmtKind::If { cond, then, els }, line: t.line, col: t.col })
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        if let (Tok::Ident(name), Tok::Assign) = (&self.peek().tok, self.peek_at(1)) {
            if !KEYWORDS.contains(&name.as_str()) {
                let t = self.advance();
                let name = name_of(&t);
                self.advance();
                let value = self.expr()?;
                return Ok(Expr { kind: ExprKind::Assign(name, Box::new(value)), line: t.line, col: t.col });
            }
        }
        self.or_expr()
    }

    fn or_expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.and_expr()?;
        while self.at(&Tok::OrOr) {
            self.advance();
            let rhs = self.and_expr()?;
            lhs = Expr { line: lhs.line, col: lhs.col, kind: ExprKind::Or(Box::new(lhs), Box::new(rhs)) };
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.binary(0)?;
        while self.at(&Tok::AndAnd) {
            self.advance();
            let rhs = self.binary(0)?;
            lhs = Expr { line: lhs.line, col: lhs.col, kind: ExprKind::And(Box::new(lhs), Box::new(rhs)) };
        }
        Ok(lhs)
    }

    fn binary(&mut self, level: usize) -> Result<Expr, ParseError> {
        const LEVELS: [&[(Tok, BinOp)]; 4] = [
            &[(Tok::EqEq, BinOp::Eq), (Tok::NotEq, BinOp::Ne)],
            &[(Tok::Lt, BinOp::Lt), (Tok::Le, BinOp::Le), (Tok::Gt, BinOp::Gt), (Tok::Ge, BinOp::Ge)],
            &[(Tok::Plus, BinOp::Add), (Tok::Minus, BinOp::Sub)],
            &[(Tok::Star, BinOp::Mul), (Tok::Slash, BinOp::Div), (Tok::Percent, BinOp::Mod)],
        ];
        if level == LEVELS.len() {
            return self.unary();
        }
        let mut lhs = self.binary(level + 1)?;
        'outer: loop {
            for (tok, op) in LEVELS[level] {
                if self.at(tok) {
                    self.advance();
                    let rhs = self.binary(level + 1)?;
                    lhs = Expr {
                        line: lhs.line,
                        col: lhs.col,
                        kind: ExprKind::Binary(*op, Box::new(lhs), Box::new(rhs)),
                    };
                    continue 'outer;
                }
            }
            return Ok(lhs);
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Minus => {
                self.advance();
                let e = self.unary()?;
                // Fold negative literals so `-1` stays a constant.
                let kind = match e.kind {
                    ExprKind::Lit(Literal::Int(i)) => ExprKind::Lit(Literal::Int(-i)),
                    ExprKind::Lit(Literal::Float(f)) => ExprKind::Lit(Literal::Float(-f)),
                    other => ExprKind::Neg(Box::new(Expr { kind: other, ..e })),
                };
                Ok(Expr { kind, line: t.line, col: t.col })
            }
            Tok::Bang => {
                self.advance();
                let e = self.unary()?;
                Ok(Expr { kind: ExprKind::Not(Box::new(e)), line: t.line, col: t.col })
            }
            _ => self.postfix(),
        }
    }

    fn postfix(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.primary()?;
        while self.at(&Tok::Dot) {
            let dot = self.advance();
            let selector = self.ident()?;
            let args = self.arg_list()?;
            e = Expr {
                kind: ExprKind::Send { receiver: Box::new(e), selector, args },
                line: dot.line,
                col: dot.col,
            };
        }
        Ok(e)
    }

    fn arg_list(&mut self) -> Result<Vec<Expr>, ParseError> {
        self.expect(&Tok::LParen)?;
        let mut args = Vec::new();
        if !self.at(&Tok::RParen) {
            args.push(self.expr()?);
            while self.at(&Tok::Comma) {
                self.advance();
                args.push(self.expr()?);
            }
        }
        self.expect(&Tok::RParen)?;
        Ok(args)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let t = self.peek().clone();
        let (line, col) = (t.line, t.col);
        let kind = match &t.tok {
            Tok::Int(i) => {
                self.advance();
                ExprKind::Lit(Literal::Int(*i))
            }
            Tok::Float(f) => {
                self.advance();
                ExprKind::Lit(Literal::Float(*f))
            }
            Tok::Str(s) => {
                self.advance();
                ExprKind::Lit(Literal::Str(s.clone()))
            }
            Tok::LParen => {
                self.advance();
                let e = self.expr()?;
                self.expect(&Tok::RParen)?;
                return Ok(e);
            }
            Tok::At => {
                self.advance();
                let name = self.ident()?;
                let args = self.arg_list()?;
                ExprKind::Prim { name, args }
            }
            Tok::Ident(s) => match s.as_str() {
                "nil" => {
                    self.advance();
                    ExprKind::Lit(Literal::Nil)
                }
                "true" | "false" => {
                    self.advance();
                    ExprKind::Lit(Literal::Bool(s == "true"))
                }
                "self" => {
                    self.advance();
                    ExprKind::SelfRef
                }
                "new" => {
                    self.advance();
                    let class = self.ident()?;
                    let args = self.arg_list()?;
                    ExprKind::New { class, args }
                }
                "fn" => {
                    self.advance();
                    let params = self.param_list()?;
                    let (body, _) = self.block_body()?;
                    ExprKind::Block { params, body }
                }
                _ => ExprKind::Var(self.ident()?),
            },
            other => return Err(self.err_here(format!("expected expression, found {}", describe(other)))),
        };
        Ok(Expr { kind, line, col })
    }
}

fn name_of(t: &Token) -> String {
    match &t.tok {
        Tok::Ident(s) => s.clone(),
        _ => unreachable!("caller matched an identifier"),
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(s) => format!("'{s}'"),
        Tok::Int(i) => format!("integer {i}"),
        Tok::Float(f) => format!("float {f}"),
        Tok::Str(_) => "string literal".into(),
        Tok::Eof => "end of input".into(),
        Tok::At => "'@'".into(),
        Tok::Assign => "':='".into(),
        Tok::LParen => "'('".into(),
        Tok::RParen => "')'".into(),
        Tok::LBrace => "'{'".into(),
        Tok::RBrace => "'}'".into(),
        Tok::Comma => "','".into(),
        Tok::Semi => "';'".into(),
        Tok::Dot => "'.'".into(),
        Tok::Plus => "'+'".into(),
        Tok::Minus => "'-'".into(),
        Tok::Star => "'*'".into(),
        Tok::Slash => "'/'".into(),
        Tok::Percent => "'%'".into(),
        Tok::EqEq => "'=='".into(),
        Tok::NotEq => "'!='".into(),
        Tok::Lt => "'<'".into(),
        Tok::Le => "'<='".into(),
        Tok::Gt => "'>'".into(),
        Tok::Ge => "'>='".into(),
        Tok::AndAnd => "'&&'".into(),
        Tok::OrOr => "'||'".into(),
        Tok::Bang => "'!'".into(),
        Tok::Eq => "'='".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_class_with_members() {
        let src = "class Counter {\n  var count, step;\n  classvar total = 0;\n  method bump(n) { count := count + n; return count; }\n}";
        let classes = parse_program(src).unwrap();
        assert_eq!(classes.len(), 1);
        let c = &classes[0];
        assert_eq!(c.ivars, vec!["count", "step"]);
        assert_eq!(c.class_vars, vec![("total".to_string(), Literal::Int(0))]);
        assert_eq!(c.methods[0].selector, "bump");
        assert_eq!(c.methods[0].source, "method bump(n) { count := count + n; return count; }");
        assert_eq!(c.methods[0].line, 4);
        assert_eq!(c.source, src);
    }

    #[test]
    fn precedence() {
        let stmts = parse_eval("1 + 2 * 3 == 7 && !false").unwrap();
        let StmtKind::Expr(e) = &stmts[0].kind else { panic!() };
        let ExprKind::And(lhs, _) = &e.kind else { panic!("{e:?}") };
        let ExprKind::Binary(BinOp::Eq, sum, _) = &lhs.kind else { panic!() };
        let ExprKind::Binary(BinOp::Add, _, prod) = &sum.kind else { panic!() };
        assert!(matches!(prod.kind, ExprKind::Binary(BinOp::Mul, _, _)));
    }

    #[test]
    fn sends_chain_and_blocks() {
        let stmts = parse_eval("xs.each(fn(x) { total := total + x; }).size()").unwrap();
        let StmtKind::Expr(e) = &stmts[0].kind else { panic!() };
        let ExprKind::Send { receiver, selector, .. } = &e.kind else { panic!() };
        assert_eq!(selector, "size");
        assert!(matches!(&receiver.kind, ExprKind::Send { selector, .. } if selector == "each"));
    }

    #[test]
    fn reports_position() {
        let err = parse_program("class A {\n  method m() { return 1 }\n}").unwrap_err();
        assert_eq!(err.line, 2);
        assert!(err.message.contains("expected ';'"), "{err}");
        assert!(parse_program("class { }").is_err());
        assert!(parse_program("class A { var if; }").is_err());
    }

    #[test]
    fn else_if_chain() {
        let m = parse_method("method f(x) { if (x < 0) { return -1; } else if (x == 0) { return 0; } else { return 1; } }")
            .unwrap();
        let StmtKind::If { els: Some(els), .. } = &m.body[0].kind else { panic!() };
        assert!(matches!(els[0].kind, StmtKind::If { els: Some(_), .. }));
    }
}
