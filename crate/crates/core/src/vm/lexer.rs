use super::error::ParseError;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    Int(i64),
    Float(f64),
    Str(String),
    At,
    Assign,
    LParen,
    RParen,
    LBrace,
    RBrace,
    Comma,
    Semi,
    Dot,
    Plus,
    Minus,
    Star,
    Slash,
    Percent,
    EqEq,
    NotEq,
    Lt,
    Le,
    Gt,
    Ge,
    AndAnd,
    OrOr,
    Bang,
    Eq,
    Eof,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub tok: Tok,
    pub line: u32,
    pub col: u32,
    /// Byte offset of the token start in the source.
    pub offset: usize,
}

pub fn tokenize(src: &str) -> Result<Vec<Token>, ParseError> {
    Lexer { src, bytes: src.as_bytes(), pos: 0, line: 1, col: 1 }.run()
}

struct Lexer<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    line: u32,
    col: u32,
}

impl Lexer<'_> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn peek2(&self) -> Option<u8> {
        self.bytes.get(self.pos + 1).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.src[self.pos..].chars().next()?;
        self.pos += c.len_utf8();
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError { line: self.line, col: self.col, message: msg.into() }
    }

    fn run(mut self) -> Result<Vec<Token>, ParseError> {
        let mut out = Vec::new();
        loop {
            self.skip_trivia();
            let (line, col, offset) = (self.line, self.col, self.pos);
            let Some(c) = self.peek() else {
                out.push(Token { tok: Tok::Eof, line, col, offset });
                return Ok(out);
            };
            let tok = if c.is_ascii_alphabetic() || c == b'_' {
                let start = self.pos;
                while matches!(self.peek(), Some(b) if b.is_ascii_alphanumeric() || b == b'_') {
                    self.bump();
                }
                Tok::Ident(self.src[start..self.pos].to_string())
            } else if c.is_ascii_digit() {
                self.number()?
            } else if c == b'"' {
                self.string()?
            } else {
                self.punct()?
            };
            out.push(Token { tok, line, col, offset });
        }
    }

    fn skip_trivia(&mut self) {
        loop {
            match self.peek() {
                Some(b' ' | b'\t' | b'\r' | b'\n') => {
                    self.bump();
                }
                Some(b'/') if self.peek2() == Some(b'/') => {
                    while !matches!(self.peek(), None | Some(b'\n')) {
                        self.bump();
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self) -> Result<Tok, ParseError> {
        let start = self.pos;
        while matches!(self.peek(), Some(b) if b.is_ascii_digit()) {
            self.bump();
        }
        let mut is_float = false;
        if self.peek() == Some(b'.') && matches!(self.peek2(), Some(b) if b.is_ascii_digit()) {
            is_float = true;
            self.bump();
            while matches!(self.peek(), Some(b) if b.is_ascii_digit()) {
                self.bump();
            }
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            let save = (self.pos, self.line, self.col);
            self.bump();
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.bump();
            }
            if matches!(self.peek(), Some(b) if b.is_ascii_digit()) {
                is_float = true;
                while matches!(self.peek(), Some(b) if b.is_ascii_digit()) {
                    self.bump();
                }
            } else {
                (self.pos, self.line, self.col) = save;
            }
        }
        let text = &self.src[start..self.pos];
        if is_float {
            text.parse().map(Tok::Float).map_err(|_| self.err(format!("bad float literal {text}")))
        } else {
            text.parse().map(Tok::Int).map_err(|_| self.err(format!("integer literal {text} out of range")))
        }
    }

    fn string(&mut self) -> Result<Tok, ParseError> {
        self.bump();
        let mut s = String::new();
        loop {
            match self.bump() {
                None => return Err(self.err("unterminated string literal")),
                Some('"') => return Ok(Tok::Str(s)),
                Some('\\') => match self.bump() {
                    Some('n') => s.push('\n'),
                    Some('t') => s.push('\t'),
                    Some('r') => s.push('\r'),
                    Some('0') => s.push('\0'),
                    Some('"') => s.push('"'),
                    Some('\\') => s.push('\\'),
                    Some('x') => {
                        let mut v = 0u32;
                        for _ in 0..2 {
                            let d = self
                                .bump()
                                .and_then(|c| c.to_digit(16))
                                .ok_or_else(|| self.err("bad \\x escape"))?;
                            v = v * 16 + d;
                        }
                        s.push(char::from_u32(v).expect("two hex digits are a valid char"));
                    }
                    _ => return Err(self.err("unknown escape sequence")),
                },
                Some(c) => s.push(c),
            }
        }
    }

    fn punct(&mut self) -> Result<Tok, ParseError> {
        let c = self.peek().expect("caller checked");
        let two = |l: &mut Self, t: Tok| {
            l.bump();
            l.bump();
            Ok(t)
        };
        match (c, self.peek2()) {
            (b':', Some(b'=')) => return two(self, Tok::Assign),
            (b'=', Some(b'=')) => return two(self, Tok::EqEq),
            (b'!', Some(b'=')) => return two(self, Tok::NotEq),
            (b'<', Some(b'=')) => return two(self, Tok::Le),
            (b'>', Some(b'=')) => return two(self, Tok::Ge),
            (b'&', Some(b'&')) => return two(self, Tok::AndAnd),
            (b'|', Some(b'|')) => return two(self, Tok::OrOr),
            _ => {}
        }
        let tok = match c {
            b'@' => Tok::At,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b'{' => Tok::LBrace,
            b'}' => Tok::RBrace,
            b',' => Tok::Comma,
            b';' => Tok::Semi,
            b'.' => Tok::Dot,
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'%' => Tok::Percent,
            b'<' => Tok::Lt,
            b'>' => Tok::Gt,
            b'!' => Tok::Bang,
            b'=' => Tok::Eq,
            _ => {
                let ch = self.src[self.pos..].chars().next().unwrap_or('?');
                return Err(self.err(format!("unexpected character {ch:?}")));
            }
        };
        self.bump();
        Ok(tok)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(src: &str) -> Vec<Tok> {
        tokenize(src).unwrap().into_iter().map(|t| t.tok).collect()
    }

    #[test]
    fn numbers_and_member_access() {
        assert_eq!(toks("1.5 2 x.y 3e2"), vec![
            Tok::Float(1.5),
            Tok::Int(2),
            Tok::Ident("x".into()),
            Tok::Dot,
            Tok::Ident("y".into()),
            Tok::Float(300.0),
            Tok::Eof
        ]);
    }

    #[test]
    fn string_escapes() {
        assert_eq!(toks(r#""a\x00\x01\n""#), vec![Tok::Str("a\u{0}\u{1}\n".into()), Tok::Eof]);
    }

    #[test]
    fn positions_and_errors() {
        let t = tokenize("a\n  b").unwrap();
        assert_eq!((t[1].line, t[1].col), (2, 3));
        let e = tokenize("x := 1 # 2").unwrap_err();
        assert_eq!((e.line, e.col), (1, 8));
        assert!(tokenize("\"open").is_err());
    }
}
