//! Textual kernel descriptions.
//!
//! ```text
//! file    := (decl | kernel)*
//! decl    := "tensor" NAME "(" INT ("," INT)* ")" ["spp" STRING]
//!            ["layout" ("dense"|"bbox"|"aligned"|"csc")]
//!          | "scalar" NAME ["=" FLOAT]
//! kernel  := "kernel" NAME "{" stmt+ ["prefetch" NAME+] "}"
//! stmt    := access ("<="|"+=") expr
//! expr    := term ("+" term)*
//! term    := factor ("*" factor)*
//! factor  := access | FLOAT | NAME | "(" expr ")"
//! access  := NAME "[" "'" LETTERS "'" "]"
//! ```
//!
//! `#` starts a comment until end of line. All diagnostics carry a
//! line and column.

use std::fmt;

use anyhow::Result;
use einkern_core::ast::{access as expr_access, lit, sym, Expr, Family};
use einkern_core::layout::LayoutPolicy;
use einkern_core::tensor::Tensor;

/// A parse or resolution problem with its location.
#[derive(Debug, Clone)]
pub struct SyntaxError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

impl fmt::Display for SyntaxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.col, self.message)
    }
}

impl std::error::Error for SyntaxError {}

/// Parsed file structure, printable back to text.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFile {
    pub decls: Vec<Decl>,
    pub kernels: Vec<KernelDef>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decl {
    Tensor { name: String, shape: Vec<usize>, spp: Option<String>, layout: Option<String> },
    Scalar { name: String, value: Option<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelDef {
    pub name: String,
    pub statements: Vec<StmtDef>,
    pub prefetch: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StmtDef {
    pub target: (String, String),
    pub accumulate: bool,
    pub expr: ExprDef,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprDef {
    Access { tensor: String, indices: String },
    Number(f64),
    Scalar(String),
    Mul(Vec<ExprDef>),
    Add(Vec<ExprDef>),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(usize),
    Float(f64),
    Indices(String),
    Str(String),
    Sym(&'static str),
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
    col: usize,
}

type Spanned = (Tok, usize, usize);

impl Lexer<'_> {
    fn error(&self, message: impl Into<String>) -> SyntaxError {
        SyntaxError { line: self.line, col: self.col, message: message.into() }
    }

    fn bump(&mut self) -> u8 {
        let b = self.src[self.pos];
        self.pos += 1;
        if b == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        b
    }

    fn lex(&mut self) -> Result<Vec<Spanned>, SyntaxError> {
        let mut out = Vec::new();
        while self.pos < self.src.len() {
            let (line, col) = (self.line, self.col);
            let b = self.src[self.pos];
            match b {
                b' ' | b'\t' | b'\r' | b'\n' => {
                    self.bump();
                }
                b'#' => {
                    while self.pos < self.src.len() && self.src[self.pos] != b'\n' {
                        self.bump();
                    }
                }
                b'\'' => {
                    self.bump();
                    let mut s = String::new();
                    loop {
                        if self.pos >= self.src.len() {
                            return Err(self.error("unterminated index string"));
                        }
                        let c = self.bump();
                        if c == b'\'' {
                            break;
                        }
                        s.push(c as char);
                    }
                    out.push((Tok::Indices(s), line, col));
                }
                b'"' => {
                    self.bump();
                    let mut s = String::new();
                    loop {
                        if self.pos >= self.src.len() {
                            return Err(self.error("unterminated string"));
                        }
                        let c = self.bump();
                        if c == b'"' {
                            break;
                        }
                        s.push(c as char);
                    }
                    out.push((Tok::Str(s), line, col));
                }
                b'(' | b')' | b'[' | b']' | b'{' | b'}' | b',' | b'*' => {
                    self.bump();
                    let sym = match b {
                        b'(' => "(",
                        b')' => ")",
                        b'[' => "[",
                        b']' => "]",
                        b'{' => "{",
                        b'}' => "}",
                        b',' => ",",
                        _ => "*",
                    };
                    out.push((Tok::Sym(sym), line, col));
                }
                b'+' => {
                    self.bump();
                    if self.pos < self.src.len() && self.src[self.pos] == b'=' {
                        self.bump();
                        out.push((Tok::Sym("+="), line, col));
                    } else {
                        out.push((Tok::Sym("+"), line, col));
                    }
                }
                b'<' => {
                    self.bump();
                    if self.pos < self.src.len() && self.src[self.pos] == b'=' {
                        self.bump();
                        out.push((Tok::Sym("<="), line, col));
                    } else {
                        return Err(self.error("expected '<='"));
                    }
                }
                b'=' => {
                    self.bump();
                    out.push((Tok::Sym("="), line, col));
                }
                b'0'..=b'9' | b'.' | b'-' => {
                    let mut s = String::new();
                    let mut is_float = false;
                    if b == b'-' {
                        s.push(self.bump() as char);
                    }
                    while self.pos < self.src.len() {
                        let c = self.src[self.pos];
                        match c {
                            b'0'..=b'9' => s.push(self.bump() as char),
                            b'.' | b'e' | b'E' => {
                                is_float = true;
                                s.push(self.bump() as char);
                                if (c == b'e' || c == b'E')
                                    && self.pos < self.src.len()
                                    && (self.src[self.pos] == b'-' || self.src[self.pos] == b'+')
                                {
                                    s.push(self.bump() as char);
                                }
                            }
                            _ => break,
                        }
                    }
                    if is_float {
                        let v: f64 =
                            s.parse().map_err(|_| self.error(format!("bad number '{s}'")))?;
                        out.push((Tok::Float(v), line, col));
                    } else {
                        let v: usize =
                            s.parse().map_err(|_| self.error(format!("bad integer '{s}'")))?;
                        out.push((Tok::Int(v), line, col));
                    }
                }
                c if c.is_ascii_alphabetic() || c == b'_' => {
                    let mut s = String::new();
                    while self.pos < self.src.len() {
                        let c = self.src[self.pos];
                        if c.is_ascii_alphanumeric() || c == b'_' {
                            s.push(self.bump() as char);
                        } else {
                            break;
                        }
                    }
                    out.push((Tok::Ident(s), line, col));
                }
                c => return Err(self.error(format!("unexpected character '{}'", c as char))),
            }
        }
        Ok(out)
    }
}

struct Parser {
    tokens: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|(t, _, _)| t)
    }

    fn span(&self) -> (usize, usize) {
        self.tokens
            .get(self.pos.min(self.tokens.len().saturating_sub(1)))
            .map(|&(_, l, c)| (l, c))
            .unwrap_or((1, 1))
    }

    fn error(&self, message: impl Into<String>) -> SyntaxError {
        let (line, col) = self.span();
        SyntaxError { line, col, message: message.into() }
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).map(|(t, _, _)| t.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect_sym(&mut self, sym: &str) -> Result<(), SyntaxError> {
        match self.peek() {
            Some(Tok::Sym(s)) if *s == sym => {
                self.next();
                Ok(())
            }
            _ => Err(self.error(format!("expected '{sym}'"))),
        }
    }

    fn expect_ident(&mut self, what: &str) -> Result<String, SyntaxError> {
        match self.peek() {
            Some(Tok::Ident(_)) => {
                let Some(Tok::Ident(s)) = self.next() else { unreachable!() };
                Ok(s)
            }
            _ => Err(self.error(format!("expected {what}"))),
        }
    }

    fn file(&mut self) -> Result<KernelFile, SyntaxError> {
        let mut decls = Vec::new();
        let mut kernels = Vec::new();
        while let Some(tok) = self.peek() {
            match tok {
                Tok::Ident(k) if k == "tensor" => {
                    self.next();
                    decls.push(self.tensor_decl()?);
                }
                Tok::Ident(k) if k == "scalar" => {
                    self.next();
                    let name = self.expect_ident("scalar name")?;
                    let value = if matches!(self.peek(), Some(Tok::Sym("="))) {
                        self.next();
                        match self.next() {
                            Some(Tok::Float(v)) => Some(v),
                            Some(Tok::Int(v)) => Some(v as f64),
                            _ => return Err(self.error("expected a number")),
                        }
                    } else {
                        None
                    };
                    decls.push(Decl::Scalar { name, value });
                }
                Tok::Ident(k) if k == "kernel" => {
                    self.next();
                    kernels.push(self.kernel()?);
                }
                _ => return Err(self.error("expected 'tensor', 'scalar', or 'kernel'")),
            }
        }
        Ok(KernelFile { decls, kernels })
    }

    fn tensor_decl(&mut self) -> Result<Decl, SyntaxError> {
        let name = self.expect_ident("tensor name")?;
        self.expect_sym("(")?;
        let mut shape = Vec::new();
        loop {
            match self.next() {
                Some(Tok::Int(v)) => shape.push(v),
                _ => return Err(self.error("expected an extent")),
            }
            match self.next() {
                Some(Tok::Sym(",")) => continue,
                Some(Tok::Sym(")")) => break,
                _ => return Err(self.error("expected ',' or ')'")),
            }
        }
        let mut spp = None;
        let mut layout = None;
        loop {
            match self.peek() {
                Some(Tok::Ident(k)) if k == "spp" => {
                    self.next();
                    match self.next() {
                        Some(Tok::Str(s)) => spp = Some(s),
                        _ => return Err(self.error("expected a quoted pattern path")),
                    }
                }
                Some(Tok::Ident(k)) if k == "layout" => {
                    self.next();
                    let kind = self.expect_ident("layout kind")?;
                    if !matches!(kind.as_str(), "dense" | "bbox" | "aligned" | "csc") {
                        return Err(self.error(format!("unknown layout '{kind}'")));
                    }
                    layout = Some(kind);
                }
                _ => break,
            }
        }
        Ok(Decl::Tensor { name, shape, spp, layout })
    }

    fn kernel(&mut self) -> Result<KernelDef, SyntaxError> {
        let name = self.expect_ident("kernel name")?;
        self.expect_sym("{")?;
        let mut statements = Vec::new();
        let mut prefetch = Vec::new();
        loop {
            match self.peek() {
                Some(Tok::Sym("}")) => {
                    self.next();
                    break;
                }
                Some(Tok::Ident(k)) if k == "prefetch" => {
                    self.next();
                    while let Some(Tok::Ident(_)) = self.peek() {
                        prefetch.push(self.expect_ident("tensor name")?);
                    }
                }
                Some(Tok::Ident(_)) => statements.push(self.statement()?),
                _ => return Err(self.error("expected a statement, 'prefetch', or '}'")),
            }
        }
        if statements.is_empty() {
            return Err(self.error(format!("kernel '{name}' has no statements")));
        }
        Ok(KernelDef { name, statements, prefetch })
    }

    fn access(&mut self) -> Result<(String, String), SyntaxError> {
        let tensor = self.expect_ident("tensor name")?;
        self.expect_sym("[")?;
        let indices = match self.next() {
            Some(Tok::Indices(s)) => s,
            _ => return Err(self.error("expected an index string like 'ij'")),
        };
        self.expect_sym("]")?;
        Ok((tensor, indices))
    }

    fn statement(&mut self) -> Result<StmtDef, SyntaxError> {
        let target = self.access()?;
        let accumulate = match self.next() {
            Some(Tok::Sym("<=")) => false,
            Some(Tok::Sym("+=")) => true,
            _ => return Err(self.error("expected '<=' or '+='")),
        };
        let expr = self.expr()?;
        Ok(StmtDef { target, accumulate, expr })
    }

    fn expr(&mut self) -> Result<ExprDef, SyntaxError> {
        let mut terms = vec![self.term()?];
        while matches!(self.peek(), Some(Tok::Sym("+"))) {
            self.next();
            terms.push(self.term()?);
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { ExprDef::Add(terms) })
    }

    fn term(&mut self) -> Result<ExprDef, SyntaxError> {
        let mut factors = vec![self.factor()?];
        while matches!(self.peek(), Some(Tok::Sym("*"))) {
            self.next();
            factors.push(self.factor()?);
        }
        Ok(if factors.len() == 1 { factors.pop().unwrap() } else { ExprDef::Mul(factors) })
    }

    fn factor(&mut self) -> Result<ExprDef, SyntaxError> {
        match self.peek() {
            Some(Tok::Sym("(")) => {
                self.next();
                let e = self.expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            Some(Tok::Float(_)) => {
                let Some(Tok::Float(v)) = self.next() else { unreachable!() };
                Ok(ExprDef::Number(v))
            }
            Some(Tok::Int(_)) => {
                let Some(Tok::Int(v)) = self.next() else { unreachable!() };
                Ok(ExprDef::Number(v as f64))
            }
            Some(Tok::Ident(_)) => {
                let name = self.expect_ident("name")?;
                if matches!(self.peek(), Some(Tok::Sym("["))) {
                    self.pos -= 1;
                    let (tensor, indices) = self.access()?;
                    Ok(ExprDef::Access { tensor, indices })
                } else {
                    Ok(ExprDef::Scalar(name))
                }
            }
            _ => Err(self.error("expected an operand")),
        }
    }
}

/// Parses a kernel file.
pub fn parse(text: &str) -> Result<KernelFile, SyntaxError> {
    let mut lexer = Lexer { src: text.as_bytes(), pos: 0, line: 1, col: 1 };
    let tokens = lexer.lex()?;
    let mut parser = Parser { tokens, pos: 0 };
    parser.file()
}

/// Prints a kernel file; `parse(print(f))` equals `f`.
pub fn print(file: &KernelFile) -> String {
    let mut out = String::new();
    for d in &file.decls {
        match d {
            Decl::Tensor { name, shape, spp, layout } => {
                let dims: Vec<String> = shape.iter().map(|e| e.to_string()).collect();
                out.push_str(&format!("tensor {name}({})", dims.join(", ")));
                if let Some(p) = spp {
                    out.push_str(&format!(" spp \"{p}\""));
                }
                if let Some(l) = layout {
                    out.push_str(&format!(" layout {l}"));
                }
                out.push('\n');
            }
            Decl::Scalar { name, value } => {
                out.push_str(&format!("scalar {name}"));
                if let Some(v) = value {
                    out.push_str(&format!(" = {v:?}"));
                }
                out.push('\n');
            }
        }
    }
    for k in &file.kernels {
        out.push_str(&format!("kernel {} {{\n", k.name));
        for s in &k.statements {
            let op = if s.accumulate { "+=" } else { "<=" };
            out.push_str(&format!(
                "  {}['{}'] {op} {}\n",
                s.target.0,
                s.target.1,
                print_expr(&s.expr, 0)
            ));
        }
        if !k.prefetch.is_empty() {
            out.push_str(&format!("  prefetch {}\n", k.prefetch.join(" ")));
        }
        out.push_str("}\n");
    }
    out
}

fn print_expr(e: &ExprDef, prec: u8) -> String {
    match e {
        ExprDef::Access { tensor, indices } => format!("{tensor}['{indices}']"),
        ExprDef::Number(v) => format!("{v:?}"),
        ExprDef::Scalar(s) => s.clone(),
        ExprDef::Mul(fs) => {
            let inner: Vec<String> = fs.iter().map(|f| print_expr(f, 2)).collect();
            let s = inner.join(" * ");
            if prec > 1 {
                format!("({s})")
            } else {
                s
            }
        }
        ExprDef::Add(ts) => {
            let inner: Vec<String> = ts.iter().map(|t| print_expr(t, 1)).collect();
            let s = inner.join(" + ");
            if prec > 0 {
                format!("({s})")
            } else {
                s
            }
        }
    }
}

/// Builds the compiler-facing family from a parsed file. Pattern paths
/// resolve through the given loader (the CLI passes a filesystem loader
/// relative to the input file).
pub fn to_family(
    file: &KernelFile,
    name: &str,
    alignment: usize,
    load_spp: &dyn Fn(&str) -> Result<einkern_core::SparsityPattern>,
) -> Result<Family, Vec<SyntaxError>> {
    let mut errors = Vec::new();
    let mut family = Family::new(name);
    for d in &file.decls {
        match d {
            Decl::Tensor { name, shape, spp, layout } => {
                let pattern = match spp {
                    Some(path) => match load_spp(path) {
                        Ok(p) => {
                            if p.extents() != shape.as_slice() {
                                errors.push(SyntaxError {
                                    line: 1,
                                    col: 1,
                                    message: format!(
                                        "pattern '{path}' extents {:?} do not match tensor '{name}' shape {shape:?}",
                                        p.extents()
                                    ),
                                });
                                continue;
                            }
                            p
                        }
                        Err(e) => {
                            errors.push(SyntaxError {
                                line: 1,
                                col: 1,
                                message: format!("cannot load pattern '{path}': {e}"),
                            });
                            continue;
                        }
                    },
                    None => einkern_core::SparsityPattern::dense(shape),
                };
                match Tensor::with_pattern(name, shape, pattern) {
                    Ok(t) => {
                        let policy = layout.as_deref().map(|l| match l {
                            "dense" => LayoutPolicy::Dense,
                            "bbox" => LayoutPolicy::BoundingBox,
                            "aligned" => LayoutPolicy::Aligned(alignment),
                            _ => LayoutPolicy::Csc,
                        });
                        match policy {
                            Some(p) => family.declare_with_layout(t, p),
                            None => family.declare(t),
                        };
                    }
                    Err(e) => {
                        errors.push(SyntaxError { line: 1, col: 1, message: format!("{e}") })
                    }
                }
            }
            Decl::Scalar { name, value } => {
                family.declare_scalar(name, *value);
            }
        }
    }
    for k in &file.kernels {
        let mut builder = family.kernel(&k.name);
        for s in &k.statements {
            let target = expr_access(&s.target.0, &s.target.1);
            let expr = build_expr(&s.expr);
            builder = if s.accumulate {
                builder.accumulate(target, expr)
            } else {
                builder.assign(target, expr)
            };
        }
        let refs: Vec<&str> = k.prefetch.iter().map(|s| s.as_str()).collect();
        builder.prefetch(&refs).build();
    }
    if errors.is_empty() {
        Ok(family)
    } else {
        Err(errors)
    }
}

fn build_expr(e: &ExprDef) -> Expr {
    match e {
        ExprDef::Access { tensor, indices } => expr_access(tensor, indices),
        ExprDef::Number(v) => lit(*v),
        ExprDef::Scalar(s) => sym(s),
        ExprDef::Mul(fs) => {
            let mut it = fs.iter().map(build_expr);
            let first = it.next().unwrap();
            it.fold(first, |a, b| a * b)
        }
        ExprDef::Add(ts) => {
            let mut it = ts.iter().map(build_expr);
            let first = it.next().unwrap();
            it.fold(first, |a, b| a + b)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = "tensor A(2, 2)\ntensor B(2, 2, 2)\ntensor C(2, 2)\ntensor w(2)\nkernel k {\n  C['ij'] <= 2.0 * C['ij'] + A['lj'] * B['ikl'] * w['k']\n}\n";

    #[test]
    fn parses_the_reference_kernel() {
        let f = parse(EXAMPLE).unwrap();
        assert_eq!(f.decls.len(), 4);
        assert_eq!(f.kernels.len(), 1);
        let k = &f.kernels[0];
        assert_eq!(k.statements.len(), 1);
        assert!(!k.statements[0].accumulate);
        match &k.statements[0].expr {
            ExprDef::Add(terms) => assert_eq!(terms.len(), 2),
            other => panic!("expected add, got {other:?}"),
        }
    }

    #[test]
    fn print_parse_roundtrip() {
        let f = parse(EXAMPLE).unwrap();
        let printed = print(&f);
        let again = parse(&printed).unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn missing_brace_reports_location() {
        let err = parse("kernel k { C['ij'] <= A['ij']").unwrap_err();
        assert!(err.line >= 1);
        assert!(err.to_string().contains("expected"));
    }

    #[test]
    fn index_length_mismatch_becomes_a_diagnostic() {
        let f = parse("tensor A(2, 2)\nkernel k { A['ijk'] <= A['ijk'] }").unwrap();
        let fam = to_family(&f, "t", 1, &|_| anyhow::bail!("no patterns")).unwrap();
        let diags = einkern_core::ast::validate_family(&fam);
        assert!(diags.iter().any(|d| d.code == "index-length"));
    }

    #[test]
    fn bad_character_is_rejected() {
        assert!(parse("tensor A(2) %").is_err());
    }
}
