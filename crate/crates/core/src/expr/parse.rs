//! Recursive-descent parser for the expression grammar.
//!
//! Whitespace is insignificant, identifiers are ASCII words, and `^` accepts
//! only an (optionally negated) numeric literal as exponent so that
//! differentiation stays total.

use super::{Expr, ExprError, UnaryOp, VarSet};

const FUNCTIONS: &[(&str, UnaryOp)] = &[
    ("ln", UnaryOp::Ln),
    ("exp", UnaryOp::Exp),
    ("sin", UnaryOp::Sin),
    ("cos", UnaryOp::Cos),
    ("sqrt", UnaryOp::Sqrt),
    ("tanh", UnaryOp::Tanh),
];

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Number(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Number(_) => "number".into(),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Caret => "`^`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn next_token(&mut self) -> Result<(Tok, usize), ExprError> {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        if self.pos >= self.src.len() {
            return Ok((Tok::End, start));
        }
        let c = self.src[self.pos];
        let tok = match c {
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'^' => Tok::Caret,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b'0'..=b'9' => return self.lex_number(start),
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos])
                    .expect("ascii")
                    .to_string();
                return Ok((Tok::Ident(name), start));
            }
            _ => {
                return Err(ExprError::Syntax {
                    position: start,
                    expected: "number, identifier, operator or parenthesis".into(),
                })
            }
        };
        self.pos += 1;
        Ok((tok, start))
    }

    fn lex_number(&mut self, start: usize) -> Result<(Tok, usize), ExprError> {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos < self.src.len() && self.src[self.pos] == b'.' {
            self.pos += 1;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        if self.pos < self.src.len() && (self.src[self.pos] | 0x20) == b'e' {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < self.src.len() && (self.src[self.pos] == b'+' || self.src[self.pos] == b'-')
            {
                self.pos += 1;
            }
            if self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                // `e` was not an exponent marker; treat it as a following token.
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        let value: f64 = text.parse().map_err(|_| ExprError::Syntax {
            position: start,
            expected: "a valid numeric literal".into(),
        })?;
        Ok((Tok::Number(value), start))
    }
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    idx: usize,
    vars: VarSet,
}

impl Parser {
    fn peek(&self) -> &(Tok, usize) {
        &self.toks[self.idx]
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.idx].clone();
        if self.idx + 1 < self.toks.len() {
            self.idx += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<usize, ExprError> {
        let (tok, pos) = self.bump();
        if tok == want {
            Ok(pos)
        } else {
            Err(ExprError::Syntax {
                position: pos,
                expected: format!("{what}, found {}", tok.describe()),
            })
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek().0 {
                Tok::Plus => {
                    self.bump();
                    lhs = Expr::add(lhs, self.term()?);
                }
                Tok::Minus => {
                    self.bump();
                    lhs = Expr::sub(lhs, self.term()?);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek().0 {
                Tok::Star => {
                    self.bump();
                    lhs = Expr::mul(lhs, self.factor()?);
                }
                Tok::Slash => {
                    self.bump();
                    lhs = Expr::div(lhs, self.factor()?);
                }
                _ => return Ok(lhs),
            }
        }
    }

    // factor := '-' factor | atom ('^' ['-'] number)?
    fn factor(&mut self) -> Result<Expr, ExprError> {
        if self.peek().0 == Tok::Minus {
            self.bump();
            return Ok(Expr::neg(self.factor()?));
        }
        let base = self.atom()?;
        if self.peek().0 == Tok::Caret {
            self.bump();
            let neg = if self.peek().0 == Tok::Minus {
                self.bump();
                true
            } else {
                false
            };
            let (tok, pos) = self.bump();
            let Tok::Number(e) = tok else {
                return Err(ExprError::Syntax {
                    position: pos,
                    expected: format!(
                        "a constant numeric exponent after `^`, found {}",
                        tok.describe()
                    ),
                });
            };
            return Ok(Expr::pow(base, if neg { -e } else { e }));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        let (tok, pos) = self.bump();
        match tok {
            Tok::Number(v) => Ok(Expr::Const(v)),
            Tok::Ident(name) => {
                if self.peek().0 == Tok::LParen {
                    let Some(&(_, op)) = FUNCTIONS.iter().find(|(n, _)| *n == name) else {
                        return Err(ExprError::UnknownIdentifier {
                            name,
                            position: pos,
                        });
                    };
                    self.bump(); // '('
                    let arg = self.expr()?;
                    self.expect(Tok::RParen, "`)` to close function call")?;
                    Ok(Expr::func(op, arg))
                } else if self.vars.contains(&name) {
                    Ok(Expr::Var(name))
                } else {
                    Err(ExprError::UnknownIdentifier {
                        name,
                        position: pos,
                    })
                }
            }
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            other => Err(ExprError::Syntax {
                position: pos,
                expected: format!(
                    "number, identifier, `(` or unary `-`, found {}",
                    other.describe()
                ),
            }),
        }
    }
}

/// Parses `source` against the variable set, honoring the documented
/// precedence (pow over unary minus over mul/div over add/sub) and
/// left-associativity of same-precedence binary operators.
pub fn parse(source: &str, vars: &VarSet) -> Result<Expr, ExprError> {
    if source.trim().is_empty() {
        return Err(ExprError::Syntax {
            position: 0,
            expected: "a non-empty expression".into(),
        });
    }
    let mut lexer = Lexer::new(source);
    let mut toks = Vec::new();
    loop {
        let (tok, pos) = lexer.next_token()?;
        let end = tok == Tok::End;
        toks.push((tok, pos));
        if end {
            break;
        }
    }
    let mut p = Parser {
        toks,
        idx: 0,
        vars: vars.clone(),
    };
    let e = p.expr()?;
    let (tok, pos) = p.peek().clone();
    if tok != Tok::End {
        return Err(ExprError::Syntax {
            position: pos,
            expected: format!("end of input, found {}", tok.describe()),
        });
    }
    Ok(e)
}
