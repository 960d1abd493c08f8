//! A small arithmetic expression language for configuring models from
//! text: expressions over the configuration `q1..qN`, velocity `v1..vN`,
//! control `u1..uM`, optionally physical time `t`, and named parameters.
//!
//! The language is closed under the [`Scalar`](crate::diffkit::Scalar)
//! primitive set, so any model written in it is automatically
//! differentiable to the order the rest of the crate needs. Parse errors
//! carry line and column positions.

use std::collections::HashMap;
use std::fmt;

use crate::diffkit::Scalar;
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Tokens

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    End,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(v) => write!(f, "number {v}"),
            Tok::Ident(s) => write!(f, "identifier `{s}`"),
            Tok::Plus => write!(f, "`+`"),
            Tok::Minus => write!(f, "`-`"),
            Tok::Star => write!(f, "`*`"),
            Tok::Slash => write!(f, "`/`"),
            Tok::Caret => write!(f, "`^`"),
            Tok::LParen => write!(f, "`(`"),
            Tok::RParen => write!(f, "`)`"),
            Tok::Comma => write!(f, "`,`"),
            Tok::End => write!(f, "end of input"),
        }
    }
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
    col: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src: src.as_bytes(), pos: 0, line: 1, col: 1 }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Config(format!("line {}, column {}: {}", self.line, self.col, msg.into()))
    }

    fn bump(&mut self) -> u8 {
        let c = self.src[self.pos];
        self.pos += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        c
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    /// Next token along with the (line, column) where it starts.
    fn next(&mut self) -> Result<(Tok, usize, usize)> {
        while matches!(self.peek(), Some(c) if c.is_ascii_whitespace()) {
            self.bump();
        }
        let (line, col) = (self.line, self.col);
        let c = match self.peek() {
            None => return Ok((Tok::End, line, col)),
            Some(c) => c,
        };
        let tok = match c {
            b'+' => {
                self.bump();
                Tok::Plus
            }
            b'-' => {
                self.bump();
                Tok::Minus
            }
            b'*' => {
                self.bump();
                Tok::Star
            }
            b'/' => {
                self.bump();
                Tok::Slash
            }
            b'^' => {
                self.bump();
                Tok::Caret
            }
            b'(' => {
                self.bump();
                Tok::LParen
            }
            b')' => {
                self.bump();
                Tok::RParen
            }
            b',' => {
                self.bump();
                Tok::Comma
            }
            b'0'..=b'9' | b'.' => {
                let start = self.pos;
                while matches!(
                    self.peek(),
                    Some(b'0'..=b'9') | Some(b'.') | Some(b'e') | Some(b'E')
                ) {
                    let was_exp = matches!(self.peek(), Some(b'e') | Some(b'E'));
                    self.bump();
                    if was_exp && matches!(self.peek(), Some(b'+') | Some(b'-')) {
                        self.bump();
                    }
                }
                let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                let v: f64 = text
                    .parse()
                    .map_err(|_| self.err(format!("malformed number `{text}`")))?;
                Tok::Num(v)
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == b'_') {
                    self.bump();
                }
                Tok::Ident(std::str::from_utf8(&self.src[start..self.pos]).unwrap().to_string())
            }
            c => return Err(self.err(format!("unexpected character `{}`", c as char))),
        };
        Ok((tok, line, col))
    }
}

// ---------------------------------------------------------------------------
// AST

#[derive(Clone, Debug)]
enum Ast {
    Const(f64),
    Var(String),
    Add(Box<Ast>, Box<Ast>),
    Sub(Box<Ast>, Box<Ast>),
    Mul(Box<Ast>, Box<Ast>),
    Div(Box<Ast>, Box<Ast>),
    Neg(Box<Ast>),
    Powi(Box<Ast>, i32),
    Call(Func, Box<Ast>),
}

#[derive(Clone, Copy, Debug)]
enum Func {
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
    Abs,
}

/// A parsed but not yet variable-resolved expression.
#[derive(Clone, Debug)]
pub struct Expr {
    ast: Ast,
    src: String,
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    tok: Tok,
    line: usize,
    col: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Result<Self> {
        let mut lexer = Lexer::new(src);
        let (tok, line, col) = lexer.next()?;
        Ok(Parser { lexer, tok, line, col })
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Config(format!("line {}, column {}: {}", self.line, self.col, msg.into()))
    }

    fn advance(&mut self) -> Result<()> {
        let (tok, line, col) = self.lexer.next()?;
        self.tok = tok;
        self.line = line;
        self.col = col;
        Ok(())
    }

    fn expect(&mut self, tok: Tok) -> Result<()> {
        if self.tok == tok {
            self.advance()
        } else {
            Err(self.err(format!("expected {tok}, found {}", self.tok)))
        }
    }

    /// Pratt parser: binding powers are additive 1, multiplicative 3,
    /// unary minus 5, exponent 7. Exponents are integer literals, so
    /// chained `^` applies left to right.
    fn expr_bp(&mut self, min_bp: u8) -> Result<Ast> {
        let mut lhs = match self.tok.clone() {
            Tok::Num(v) => {
                self.advance()?;
                Ast::Const(v)
            }
            Tok::Ident(name) => {
                self.advance()?;
                if self.tok == Tok::LParen {
                    let f = match name.as_str() {
                        "sin" => Func::Sin,
                        "cos" => Func::Cos,
                        "exp" => Func::Exp,
                        "ln" => Func::Ln,
                        "sqrt" => Func::Sqrt,
                        "abs" => Func::Abs,
                        other => return Err(self.err(format!("unknown function `{other}`"))),
                    };
                    self.advance()?;
                    let arg = self.expr_bp(0)?;
                    self.expect(Tok::RParen)?;
                    Ast::Call(f, Box::new(arg))
                } else {
                    Ast::Var(name)
                }
            }
            Tok::Minus => {
                self.advance()?;
                Ast::Neg(Box::new(self.expr_bp(5)?))
            }
            Tok::LParen => {
                self.advance()?;
                let inner = self.expr_bp(0)?;
                self.expect(Tok::RParen)?;
                inner
            }
            other => return Err(self.err(format!("expected an expression, found {other}"))),
        };
        loop {
            let (bp, right_bp) = match self.tok {
                Tok::Plus | Tok::Minus => (1, 2),
                Tok::Star | Tok::Slash => (3, 4),
                Tok::Caret => (7, 7),
                _ => break,
            };
            if bp < min_bp {
                break;
            }
            let op = self.tok.clone();
            self.advance()?;
            if op == Tok::Caret {
                // Exponentiation is restricted to integer literals so the
                // expression stays within the differentiable primitive set.
                let neg = if self.tok == Tok::Minus {
                    self.advance()?;
                    true
                } else {
                    false
                };
                let n = match self.tok {
                    Tok::Num(v) if v.fract() == 0.0 && v.abs() <= i32::MAX as f64 => v as i32,
                    _ => return Err(self.err("exponent must be an integer literal")),
                };
                self.advance()?;
                lhs = Ast::Powi(Box::new(lhs), if neg { -n } else { n });
                continue;
            }
            let rhs = self.expr_bp(right_bp)?;
            lhs = match op {
                Tok::Plus => Ast::Add(Box::new(lhs), Box::new(rhs)),
                Tok::Minus => Ast::Sub(Box::new(lhs), Box::new(rhs)),
                Tok::Star => Ast::Mul(Box::new(lhs), Box::new(rhs)),
                Tok::Slash => Ast::Div(Box::new(lhs), Box::new(rhs)),
                _ => unreachable!(),
            };
        }
        Ok(lhs)
    }
}

impl Expr {
    /// Parse a single expression; trailing input is an error.
    pub fn parse(src: &str) -> Result<Expr> {
        let mut p = Parser::new(src)?;
        let ast = p.expr_bp(0)?;
        if p.tok != Tok::End {
            return Err(p.err(format!("unexpected {} after expression", p.tok)));
        }
        Ok(Expr { ast, src: src.to_string() })
    }

    /// Resolve variable names against the binding context, producing an
    /// expression that evaluates without further lookups. Parameters are
    /// substituted as constants.
    pub fn bind(&self, ctx: &BindCtx) -> Result<BoundExpr> {
        Ok(BoundExpr { node: bind_ast(&self.ast, ctx, &self.src)? })
    }
}

/// Names visible to an expression.
pub struct BindCtx<'p> {
    pub n_q: usize,
    pub n_u: usize,
    /// Whether physical time `t` may appear (control signals only).
    pub allow_t: bool,
    pub params: &'p HashMap<String, f64>,
}

#[derive(Clone, Debug)]
enum Node {
    Const(f64),
    Q(usize),
    V(usize),
    U(usize),
    T,
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Neg(Box<Node>),
    Powi(Box<Node>, i32),
    Call(Func, Box<Node>),
}

/// An expression with all names resolved to argument slots.
#[derive(Clone, Debug)]
pub struct BoundExpr {
    node: Node,
}

fn indexed(name: &str, prefix: char, n: usize) -> Option<Result<usize>> {
    let rest = name.strip_prefix(prefix)?;
    let i: usize = rest.parse().ok()?;
    Some(if i >= 1 && i <= n {
        Ok(i - 1)
    } else {
        Err(Error::Config(format!("`{name}` out of range (1..={n})")))
    })
}

fn bind_ast(ast: &Ast, ctx: &BindCtx, src: &str) -> Result<Node> {
    let b = |a: &Ast| -> Result<Box<Node>> { Ok(Box::new(bind_ast(a, ctx, src)?)) };
    Ok(match ast {
        Ast::Const(v) => Node::Const(*v),
        Ast::Var(name) => {
            if let Some(r) = indexed(name, 'q', ctx.n_q) {
                Node::Q(r?)
            } else if let Some(r) = indexed(name, 'v', ctx.n_q) {
                Node::V(r?)
            } else if let Some(r) = indexed(name, 'u', ctx.n_u) {
                Node::U(r?)
            } else if name == "t" && ctx.allow_t {
                Node::T
            } else if let Some(&v) = ctx.params.get(name) {
                Node::Const(v)
            } else {
                return Err(Error::Config(format!(
                    "unknown name `{name}` in expression `{src}`"
                )));
            }
        }
        Ast::Add(a, c) => Node::Add(b(a)?, b(c)?),
        Ast::Sub(a, c) => Node::Sub(b(a)?, b(c)?),
        Ast::Mul(a, c) => Node::Mul(b(a)?, b(c)?),
        Ast::Div(a, c) => Node::Div(b(a)?, b(c)?),
        Ast::Neg(a) => Node::Neg(b(a)?),
        Ast::Powi(a, n) => Node::Powi(b(a)?, *n),
        Ast::Call(f, a) => Node::Call(*f, b(a)?),
    })
}

impl BoundExpr {
    /// Evaluate over any differentiable scalar. `t` is only consulted if
    /// the expression was bound with `allow_t`.
    pub fn eval<S: Scalar>(&self, q: &[S], v: &[S], u: &[S], t: &S) -> S {
        eval_node(&self.node, q, v, u, t)
    }
}

fn eval_node<S: Scalar>(n: &Node, q: &[S], v: &[S], u: &[S], t: &S) -> S {
    match n {
        Node::Const(c) => S::constant(*c),
        Node::Q(i) => q[*i].clone(),
        Node::V(i) => v[*i].clone(),
        Node::U(i) => u[*i].clone(),
        Node::T => t.clone(),
        Node::Add(a, b) => eval_node(a, q, v, u, t) + eval_node(b, q, v, u, t),
        Node::Sub(a, b) => eval_node(a, q, v, u, t) - eval_node(b, q, v, u, t),
        Node::Mul(a, b) => eval_node(a, q, v, u, t) * eval_node(b, q, v, u, t),
        Node::Div(a, b) => eval_node(a, q, v, u, t) / eval_node(b, q, v, u, t),
        Node::Neg(a) => -eval_node(a, q, v, u, t),
        Node::Powi(a, k) => eval_node(a, q, v, u, t).powi(*k),
        Node::Call(f, a) => {
            let x = eval_node(a, q, v, u, t);
            match f {
                Func::Sin => x.sin(),
                Func::Cos => x.cos(),
                Func::Exp => x.exp(),
                Func::Ln => x.ln(),
                Func::Sqrt => x.sqrt(),
                Func::Abs => x.abs(),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Expression-defined contact model

use crate::model::CLSDynamics;

/// A contact model whose dynamics, inertia, gap, and tangent basis are
/// given by bound expressions. Used by the CLI configuration format; the
/// library API takes native [`CLSDynamics`] implementations directly.
#[derive(Clone, Debug)]
pub struct ExprModel {
    pub n_q: usize,
    pub n_u: usize,
    f_v: Vec<BoundExpr>,
    mass: Vec<BoundExpr>,
    gap: BoundExpr,
    tangents: Vec<Vec<BoundExpr>>,
}

impl ExprModel {
    /// Parse and bind all expression strings. `mass` is row-major
    /// `n_q x n_q`; each tangent row has `n_q` entries.
    pub fn new(
        n_q: usize,
        n_u: usize,
        f_v: &[String],
        mass: &[String],
        gap: &str,
        tangents: &[Vec<String>],
        params: &HashMap<String, f64>,
    ) -> Result<Self> {
        let ctx = BindCtx { n_q, n_u, allow_t: false, params };
        let bind_one = |s: &str| -> Result<BoundExpr> { Expr::parse(s)?.bind(&ctx) };
        if f_v.len() != n_q {
            return Err(Error::Config(format!(
                "f_v must have {n_q} entries, found {}",
                f_v.len()
            )));
        }
        if mass.len() != n_q * n_q {
            return Err(Error::Config(format!(
                "mass must have {} entries (row-major {n_q}x{n_q}), found {}",
                n_q * n_q,
                mass.len()
            )));
        }
        for (i, row) in tangents.iter().enumerate() {
            if row.len() != n_q {
                return Err(Error::Config(format!(
                    "tangent {} must have {n_q} entries, found {}",
                    i + 1,
                    row.len()
                )));
            }
        }
        Ok(ExprModel {
            n_q,
            n_u,
            f_v: f_v.iter().map(|s| bind_one(s)).collect::<Result<_>>()?,
            mass: mass.iter().map(|s| bind_one(s)).collect::<Result<_>>()?,
            gap: bind_one(gap)?,
            tangents: tangents
                .iter()
                .map(|row| row.iter().map(|s| bind_one(s)).collect::<Result<_>>())
                .collect::<Result<_>>()?,
        })
    }
}

impl CLSDynamics for ExprModel {
    fn n_q(&self) -> usize {
        self.n_q
    }
    fn n_u(&self) -> usize {
        self.n_u
    }
    fn f_v<S: Scalar>(&self, q: &[S], v: &[S], u: &[S]) -> Vec<S> {
        let t = S::zero();
        self.f_v.iter().map(|e| e.eval(q, v, u, &t)).collect()
    }
    fn mass<S: Scalar>(&self, q: &[S]) -> Vec<S> {
        let (t, e) = (S::zero(), Vec::new());
        self.mass.iter().map(|m| m.eval(q, &e, &e, &t)).collect()
    }
    fn gap<S: Scalar>(&self, q: &[S]) -> S {
        let (t, e) = (S::zero(), Vec::new());
        self.gap.eval(q, &e, &e, &t)
    }
    fn tangents<S: Scalar>(&self, q: &[S]) -> Vec<Vec<S>> {
        let (t, e) = (S::zero(), Vec::<S>::new());
        self.tangents
            .iter()
            .map(|row| row.iter().map(|c| c.eval(q, &e, &e, &t)).collect())
            .collect()
    }
}
