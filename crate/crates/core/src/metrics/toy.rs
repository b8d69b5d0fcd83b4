//! A tiny imperative language used by the synthetic corpus and CodeBLEU.
//!
//! ```text
//! program := NL* [ "def" IDENT "(" [IDENT ("," IDENT)*] ")" ":" ] line*
//! line    := stmt (";" stmt)* (NL | EOF)
//! stmt    := "if" expr ":" branch ["else" ":" branch]
//!          | "return" expr
//!          | IDENT "=" expr
//! branch  := simple (";" simple)*        simple := assign | return
//! expr    := sum (("<" | "==") sum)*
//! sum     := term (("+" | "-") term)*
//! term    := atom (("*" | "/") atom)*
//! atom    := INT | IDENT | IDENT "(" [expr ("," expr)*] ")" | "(" expr ")"
//! ```
//!
//! Branches hold only simple statements, so any `;` after an `if` header is
//! unambiguous and pretty-printing always re-parses to the same tree.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Eq,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Lt => "<",
            BinOp::Eq => "==",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Lt | BinOp::Eq => 1,
            BinOp::Add | BinOp::Sub => 2,
            BinOp::Mul | BinOp::Div => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Expr {
    Var(String),
    Int(u64),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(String, Vec<Expr>),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Stmt {
    Assign(String, Expr),
    If(Expr, Vec<Stmt>, Vec<Stmt>),
    Return(Expr),
}

/// Root of a parsed program. `name`/`params` come from the optional header.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct ToyAst {
    pub name: Option<String>,
    pub params: Vec<String>,
    pub body: Vec<Stmt>,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("syntax error at {line}:{column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Int(u64),
    Def,
    If,
    Else,
    Return,
    Sym(&'static str),
    Newline,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "identifier `{s}`"),
            Tok::Int(v) => write!(f, "integer `{v}`"),
            Tok::Def => f.write_str("`def`"),
            Tok::If => f.write_str("`if`"),
            Tok::Else => f.write_str("`else`"),
            Tok::Return => f.write_str("`return`"),
            Tok::Sym(s) => write!(f, "`{s}`"),
            Tok::Newline => f.write_str("end of line"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

pub const KEYWORDS: [&str; 4] = ["def", "if", "else", "return"];

struct Lexed {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(src: &str) -> Result<Vec<Lexed>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        let start_col = col;
        if c == '\n' {
            out.push(Lexed {
                tok: Tok::Newline,
                line,
                column: col,
            });
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        let tok = if c.is_ascii_digit() {
            let mut v: u64 = 0;
            while i < chars.len() && chars[i].is_ascii_digit() {
                v = v
                    .checked_mul(10)
                    .and_then(|v| v.checked_add(chars[i] as u64 - '0' as u64))
                    .ok_or_else(|| ParseError {
                        line,
                        column: start_col,
                        message: "integer literal overflows".into(),
                    })?;
                i += 1;
                col += 1;
            }
            Tok::Int(v)
        } else if c.is_alphabetic() || c == '_' {
            let mut s = String::new();
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                s.push(chars[i]);
                i += 1;
                col += 1;
            }
            match s.as_str() {
                "def" => Tok::Def,
                "if" => Tok::If,
                "else" => Tok::Else,
                "return" => Tok::Return,
                _ => Tok::Ident(s),
            }
        } else {
            let two = if i + 1 < chars.len() && c == '=' && chars[i + 1] == '=' {
                Some("==")
            } else {
                None
            };
            let sym = match (two, c) {
                (Some(s), _) => s,
                (None, '+') => "+",
                (None, '-') => "-",
                (None, '*') => "*",
                (None, '/') => "/",
                (None, '<') => "<",
                (None, '=') => "=",
                (None, '(') => "(",
                (None, ')') => ")",
                (None, ',') => ",",
                (None, ':') => ":",
                (None, ';') => ";",
                _ => {
                    return Err(ParseError {
                        line,
                        column: col,
                        message: format!("unexpected character {c:?}"),
                    })
                }
            };
            i += sym.len();
            col += sym.len();
            Tok::Sym(sym)
        };
        out.push(Lexed {
            tok,
            line,
            column: start_col,
        });
    }
    out.push(Lexed {
        tok: Tok::Eof,
        line,
        column: col,
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Lexed>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &str) -> ParseError {
        let at = &self.toks[self.pos];
        ParseError {
            line: at.line,
            column: at.column,
            message: format!("expected {expected}, found {}", at.tok),
        }
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if matches!(self.peek(), Tok::Sym(x) if *x == s) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &str) -> Result<(), ParseError> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            Err(self.error(&format!("`{s}`")))
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            _ => Err(self.error("identifier")),
        }
    }

    fn skip_newlines(&mut self) {
        while *self.peek() == Tok::Newline {
            self.bump();
        }
    }

    fn end_of_line(&mut self) -> Result<(), ParseError> {
        match self.peek() {
            Tok::Newline => {
                self.bump();
                Ok(())
            }
            Tok::Eof => Ok(()),
            _ => Err(self.error("end of line")),
        }
    }

    fn program(&mut self) -> Result<ToyAst, ParseError> {
        let mut ast = ToyAst::default();
        self.skip_newlines();
        if *self.peek() == Tok::Def {
            self.bump();
            ast.name = Some(self.ident()?);
            self.expect_sym("(")?;
            if !self.eat_sym(")") {
                loop {
                    ast.params.push(self.ident()?);
                    if self.eat_sym(")") {
                        break;
                    }
                    self.expect_sym(",")?;
                }
            }
            self.expect_sym(":")?;
            self.end_of_line()?;
        }
        loop {
            self.skip_newlines();
            if *self.peek() == Tok::Eof {
                break;
            }
            ast.body.push(self.stmt()?);
            while self.eat_sym(";") {
                ast.body.push(self.stmt()?);
            }
            self.end_of_line()?;
        }
        Ok(ast)
    }

    fn stmt(&mut self) -> Result<Stmt, ParseError> {
        if *self.peek() == Tok::If {
            self.bump();
            let cond = self.expr()?;
            self.expect_sym(":")?;
            let then = self.branch()?;
            let otherwise = if *self.peek() == Tok::Else {
                self.bump();
                self.expect_sym(":")?;
                self.branch()?
            } else {
                Vec::new()
            };
            Ok(Stmt::If(cond, then, otherwise))
        } else {
            self.simple()
        }
    }

    fn simple(&mut self) -> Result<Stmt, ParseError> {
        match self.peek().clone() {
            Tok::Return => {
                self.bump();
                Ok(Stmt::Return(self.expr()?))
            }
            Tok::Ident(name) => {
                self.bump();
                self.expect_sym("=")?;
                Ok(Stmt::Assign(name, self.expr()?))
            }
            _ => Err(self.error("statement")),
        }
    }

    fn branch(&mut self) -> Result<Vec<Stmt>, ParseError> {
        let mut out = vec![self.simple()?];
        while self.eat_sym(";") {
            out.push(self.simple()?);
        }
        Ok(out)
    }

    fn binary_level(
        &mut self,
        ops: &[(&str, BinOp)],
        next: fn(&mut Self) -> Result<Expr, ParseError>,
    ) -> Result<Expr, ParseError> {
        let mut lhs = next(self)?;
        'outer: loop {
            for (sym, op) in ops {
                if self.eat_sym(sym) {
                    let rhs = next(self)?;
                    lhs = Expr::Bin(*op, Box::new(lhs), Box::new(rhs));
                    continue 'outer;
                }
            }
            return Ok(lhs);
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(&[("<", BinOp::Lt), ("==", BinOp::Eq)], Self::sum)
    }

    fn sum(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(&[("+", BinOp::Add), ("-", BinOp::Sub)], Self::term)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(&[("*", BinOp::Mul), ("/", BinOp::Div)], Self::atom)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                Ok(Expr::Int(v))
            }
            Tok::Ident(name) => {
                self.bump();
                if self.eat_sym("(") {
                    let mut args = Vec::new();
                    if !self.eat_sym(")") {
                        loop {
                            args.push(self.expr()?);
                            if self.eat_sym(")") {
                                break;
                            }
                            self.expect_sym(",")?;
                        }
                    }
                    Ok(Expr::Call(name, args))
                } else {
                    Ok(Expr::Var(name))
                }
            }
            Tok::Sym("(") => {
                self.bump();
                let e = self.expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            _ => Err(self.error("expression")),
        }
    }
}

/// Parses toy-language source text.
pub fn parse_toy(source: &str) -> Result<ToyAst, ParseError> {
    let toks = lex(source)?;
    Parser { toks, pos: 0 }.program()
}

fn write_expr(e: &Expr, out: &mut String) {
    match e {
        Expr::Var(v) => out.push_str(v),
        Expr::Int(v) => out.push_str(&v.to_string()),
        Expr::Call(name, args) => {
            out.push_str(name);
            out.push('(');
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_expr(a, out);
            }
            out.push(')');
        }
        Expr::Bin(op, l, r) => {
            let p = op.precedence();
            let child = |e: &Expr, right: bool, out: &mut String| {
                let needs = match e {
                    Expr::Bin(cop, ..) => cop.precedence() < p || (right && cop.precedence() == p),
                    _ => false,
                };
                if needs {
                    out.push('(');
                }
                write_expr(e, out);
                if needs {
                    out.push(')');
                }
            };
            child(l, false, out);
            out.push(' ');
            out.push_str(op.symbol());
            out.push(' ');
            child(r, true, out);
        }
    }
}

fn write_simple(s: &Stmt, out: &mut String) {
    match s {
        Stmt::Assign(name, e) => {
            out.push_str(name);
            out.push_str(" = ");
            write_expr(e, out);
        }
        Stmt::Return(e) => {
            out.push_str("return ");
            write_expr(e, out);
        }
        Stmt::If(c, t, f) => {
            out.push_str("if ");
            write_expr(c, out);
            out.push_str(": ");
            write_block(t, out);
            if !f.is_empty() {
                out.push_str(" else: ");
                write_block(f, out);
            }
        }
    }
}

fn write_block(stmts: &[Stmt], out: &mut String) {
    for (i, s) in stmts.iter().enumerate() {
        if i > 0 {
            out.push_str("; ");
        }
        write_simple(s, out);
    }
}

impl ToyAst {
    /// Canonical surface form; `parse_toy(ast.to_source()) == ast`.
    pub fn to_source(&self) -> String {
        let mut out = String::new();
        if let Some(name) = &self.name {
            out.push_str("def ");
            out.push_str(name);
            out.push('(');
            out.push_str(&self.params.join(", "));
            out.push_str("):");
            if !self.body.is_empty() {
                out.push('\n');
            }
        }
        for (i, s) in self.body.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            write_simple(s, &mut out);
        }
        out
    }
}

impl fmt::Display for ToyAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_source())
    }
}

/// Where a variable received its value.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DefSite {
    Param,
    Assign,
}

/// The statement context in which a variable is read.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UseSite {
    /// Right-hand side of an assignment to the named variable.
    Assign(String),
    Condition,
    Return,
}

/// A definition → use link, with program positions dropped.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DefUseEdge {
    pub var: String,
    pub def: DefSite,
    pub use_site: UseSite,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("variable `{var}` is read before any definition")]
pub struct DataflowError {
    pub var: String,
}

type Env = BTreeMap<String, BTreeSet<(usize, DefSite)>>;

struct Flow {
    next_id: usize,
    edges: Vec<DefUseEdge>,
    undefined: Vec<String>,
}

impl Flow {
    fn uses(&mut self, e: &Expr, env: &Env, site: &UseSite) {
        match e {
            Expr::Var(v) => match env.get(v) {
                Some(defs) => {
                    for (_, def) in defs {
                        self.edges.push(DefUseEdge {
                            var: v.clone(),
                            def: def.clone(),
                            use_site: site.clone(),
                        });
                    }
                }
                None => self.undefined.push(v.clone()),
            },
            Expr::Int(_) => {}
            Expr::Bin(_, l, r) => {
                self.uses(l, env, site);
                self.uses(r, env, site);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| self.uses(a, env, site)),
        }
    }

    fn block(&mut self, stmts: &[Stmt], mut env: Env) -> Env {
        for s in stmts {
            match s {
                Stmt::Assign(x, e) => {
                    self.uses(e, &env, &UseSite::Assign(x.clone()));
                    self.next_id += 1;
                    env.insert(x.clone(), BTreeSet::from([(self.next_id, DefSite::Assign)]));
                }
                Stmt::Return(e) => self.uses(e, &env, &UseSite::Return),
                Stmt::If(c, t, f) => {
                    self.uses(c, &env, &UseSite::Condition);
                    let a = self.block(t, env.clone());
                    let b = self.block(f, env.clone());
                    for (k, v) in a.into_iter().chain(b) {
                        env.entry(k).or_default().extend(v);
                    }
                }
            }
        }
        env
    }
}

fn run_flow(ast: &ToyAst) -> Flow {
    let mut flow = Flow {
        next_id: 0,
        edges: Vec::new(),
        undefined: Vec::new(),
    };
    let mut env = Env::new();
    for p in &ast.params {
        flow.next_id += 1;
        env.insert(p.clone(), BTreeSet::from([(flow.next_id, DefSite::Param)]));
    }
    flow.block(&ast.body, env);
    flow
}

impl ToyAst {
    /// Def-use edges in program order, one per reaching definition.
    pub fn def_use_edges(&self) -> Vec<DefUseEdge> {
        run_flow(self).edges
    }

    /// Every read must be reached by a parameter or an earlier assignment.
    pub fn check_dataflow(&self) -> Result<(), DataflowError> {
        match run_flow(self).undefined.into_iter().next() {
            Some(var) => Err(DataflowError { var }),
            None => Ok(()),
        }
    }

    /// Anonymized serializations of every subtree with at least two nodes.
    pub fn subtrees(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut parts = Vec::new();
        let mut size = 1;
        for s in &self.body {
            let (text, n) = stmt_tree(s, &mut out);
            parts.push(text);
            size += n;
        }
        if size >= 2 {
            out.push(format!("(program {})", parts.join(" ")));
        }
        out
    }
}

fn keep(text: String, size: usize, out: &mut Vec<String>) -> (String, usize) {
    if size >= 2 {
        out.push(text.clone());
    }
    (text, size)
}

fn expr_tree(e: &Expr, out: &mut Vec<String>) -> (String, usize) {
    match e {
        Expr::Var(_) => ("var".into(), 1),
        Expr::Int(v) => (format!("int:{v}"), 1),
        Expr::Bin(op, l, r) => {
            let (lt, ln) = expr_tree(l, out);
            let (rt, rn) = expr_tree(r, out);
            keep(format!("({} {lt} {rt})", op.symbol()), 1 + ln + rn, out)
        }
        Expr::Call(_, args) => {
            let mut parts = Vec::new();
            let mut size = 1;
            for a in args {
                let (t, n) = expr_tree(a, out);
                parts.push(t);
                size += n;
            }
            keep(format!("(call {})", parts.join(" ")), size, out)
        }
    }
}

fn stmt_tree(s: &Stmt, out: &mut Vec<String>) -> (String, usize) {
    match s {
        Stmt::Assign(_, e) => {
            let (t, n) = expr_tree(e, out);
            keep(format!("(assign {t})"), 1 + n, out)
        }
        Stmt::Return(e) => {
            let (t, n) = expr_tree(e, out);
            keep(format!("(return {t})"), 1 + n, out)
        }
        Stmt::If(c, then, other) => {
            let (ct, cn) = expr_tree(c, out);
            let mut size = 1 + cn;
            let mut branch = |stmts: &[Stmt], out: &mut Vec<String>| {
                stmts
                    .iter()
                    .map(|s| {
                        let (t, n) = stmt_tree(s, out);
                        size += n;
                        t
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let tt = branch(then, out);
            let ot = branch(other, out);
            keep(format!("(if {ct} (then {tt}) (else {ot}))"), size, out)
        }
    }
}
