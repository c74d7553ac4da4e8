//! Symbolic coefficient expressions for vector fields.
//!
//! Expressions are parsed from a small arithmetic grammar over the variables
//! `x1..xn`, kept in a constant-folded canonical form, and support exact
//! symbolic differentiation so that Lie brackets and Jacobians downstream are
//! free of finite-difference error.
//!
//! Grammar (EBNF):
//!
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := atom ('^' '-'? number)?
//! atom   := number | 'x' digit+ | func '(' expr ')' | '(' expr ')' | '-' atom
//! func   := 'sin' | 'cos' | 'exp' | 'abs' | 'sign'
//! ```
//!
//! An integer exponent literal (`x1^3`) is an ordinary power; an exponent
//! written with a decimal point or scientific notation (`x1^2.6`) is a real
//! power applied to the absolute value of the base, so `x1^2.6` means
//! `abs(x1)^2.6`. `sign` appears in derivatives of `abs` and of real powers
//! and is accepted on input so printed derivatives re-parse.
//!
//! Differentiating through `abs`, `sign`, or a real power is only valid away
//! from zeros of the inner expression; such derivatives are marked weak (see
//! [`FieldExpr::weak`]) and the zero loci are recorded. Grid samplers offset
//! their nodes by half a cell so they never land exactly on a weak point.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Expression tree in constant-folded canonical form.
///
/// Canonical means: produced through the folding constructors in this module,
/// so no subterm is a constant-only operation, no operand is an additive or
/// multiplicative identity, and unary minus never wraps a constant or another
/// unary minus. [`parse_field_expr`] and [`FieldExpr::differentiate`] only
/// build canonical trees, and the printer round-trips them exactly.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// 1-based variable index.
    Var(usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    /// Integer power of the base.
    Pow(Box<Expr>, i32),
    /// Real power of the absolute value of the base.
    Powf(Box<Expr>, f64),
    Neg(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
    Abs(Box<Expr>),
    Sign(Box<Expr>),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("syntax error at column {col}: {msg}")]
    Syntax { col: usize, msg: String },
    #[error("unknown identifier `{name}` at column {col}")]
    UnknownIdentifier { name: String, col: usize },
    #[error("variable x{index} exceeds dimension {n}")]
    VarIndex { index: usize, n: usize },
}

#[derive(Debug, Error, Clone)]
pub enum FieldError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("field family needs q >= n >= 1, got q={q}, n={n}")]
    BadShape { q: usize, n: usize },
    #[error("field {field} component {comp} has {found} coefficients, expected {n}")]
    BadRow {
        field: usize,
        comp: usize,
        found: usize,
        n: usize,
    },
    #[error("field {field} component {comp} is not finite at {point:?} in the stated domain")]
    UndefinedOnDomain {
        field: usize,
        comp: usize,
        point: Vec<f64>,
    },
    #[error("expression over {expr_n} variables cannot join a family of dimension {n}")]
    DimensionMismatch { expr_n: usize, n: usize },
}

// ---------------------------------------------------------------------------
// Folding constructors. All AST production goes through these so that parsed
// and differentiated trees share one canonical form.
// ---------------------------------------------------------------------------

fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
        (Expr::Const(z), e) if z == 0.0 => e,
        (e, Expr::Const(z)) if z == 0.0 => e,
        (a, b) => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
        (e, Expr::Const(z)) if z == 0.0 => e,
        (Expr::Const(z), e) if z == 0.0 => neg(e),
        (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
        (Expr::Const(z), _) | (_, Expr::Const(z)) if z == 0.0 => Expr::Const(0.0),
        (Expr::Const(o), e) if o == 1.0 => e,
        (e, Expr::Const(o)) if o == 1.0 => e,
        (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) if y != 0.0 => Expr::Const(x / y),
        (Expr::Const(z), b) if z == 0.0 && !matches!(b, Expr::Const(c) if c == 0.0) => {
            Expr::Const(0.0)
        }
        (e, Expr::Const(o)) if o == 1.0 => e,
        (a, b) => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn neg(e: Expr) -> Expr {
    match e {
        Expr::Const(c) => Expr::Const(-c),
        Expr::Neg(inner) => *inner,
        e => Expr::Neg(Box::new(e)),
    }
}

fn pow(e: Expr, k: i32) -> Expr {
    match (e, k) {
        (_, 0) => Expr::Const(1.0),
        (e, 1) => e,
        (Expr::Const(c), k) => Expr::Const(c.powi(k)),
        (e, k) => Expr::Pow(Box::new(e), k),
    }
}

fn powf(e: Expr, r: f64) -> Expr {
    match e {
        Expr::Const(c) => Expr::Const(c.abs().powf(r)),
        e => Expr::Powf(Box::new(e), r),
    }
}

fn sin(e: Expr) -> Expr {
    match e {
        Expr::Const(c) => Expr::Const(c.sin()),
        e => Expr::Sin(Box::new(e)),
    }
}

fn cos(e: Expr) -> Expr {
    match e {
        Expr::Const(c) => Expr::Const(c.cos()),
        e => Expr::Cos(Box::new(e)),
    }
}

fn exp(e: Expr) -> Expr {
    match e {
        Expr::Const(c) => Expr::Const(c.exp()),
        e => Expr::Exp(Box::new(e)),
    }
}

fn abs(e: Expr) -> Expr {
    match e {
        Expr::Const(c) => Expr::Const(c.abs()),
        e => Expr::Abs(Box::new(e)),
    }
}

fn sign(e: Expr) -> Expr {
    match e {
        Expr::Const(c) => Expr::Const(sign_val(c)),
        e => Expr::Sign(Box::new(e)),
    }
}

fn sign_val(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v.signum()
    }
}

impl Expr {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => x[*i - 1],
            Expr::Add(a, b) => a.eval(x) + b.eval(x),
            Expr::Sub(a, b) => a.eval(x) - b.eval(x),
            Expr::Mul(a, b) => a.eval(x) * b.eval(x),
            Expr::Div(a, b) => a.eval(x) / b.eval(x),
            Expr::Pow(a, k) => a.eval(x).powi(*k),
            Expr::Powf(a, r) => a.eval(x).abs().powf(*r),
            Expr::Neg(a) => -a.eval(x),
            Expr::Sin(a) => a.eval(x).sin(),
            Expr::Cos(a) => a.eval(x).cos(),
            Expr::Exp(a) => a.eval(x).exp(),
            Expr::Abs(a) => a.eval(x).abs(),
            Expr::Sign(a) => sign_val(a.eval(x)),
        }
    }

    fn max_var(&self) -> usize {
        match self {
            Expr::Const(_) => 0,
            Expr::Var(i) => *i,
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.max_var().max(b.max_var())
            }
            Expr::Pow(a, _) | Expr::Powf(a, _) => a.max_var(),
            Expr::Neg(a) | Expr::Sin(a) | Expr::Cos(a) | Expr::Exp(a) | Expr::Abs(a)
            | Expr::Sign(a) => a.max_var(),
        }
    }

    fn depends_on(&self, k: usize) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(i) => *i == k,
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.depends_on(k) || b.depends_on(k)
            }
            Expr::Pow(a, _) | Expr::Powf(a, _) => a.depends_on(k),
            Expr::Neg(a) | Expr::Sin(a) | Expr::Cos(a) | Expr::Exp(a) | Expr::Abs(a)
            | Expr::Sign(a) => a.depends_on(k),
        }
    }

    /// Partial derivative with respect to `x_k`. The boolean is true when the
    /// derivative passed through a kink (`abs`, `sign`, or a real power) and
    /// is therefore only a weak derivative at zeros of the recorded inner
    /// expressions, which are appended to `weak_loci`.
    fn diff(&self, k: usize, weak_loci: &mut Vec<Expr>) -> (Expr, bool) {
        match self {
            Expr::Const(_) => (Expr::Const(0.0), false),
            Expr::Var(i) => (Expr::Const(if *i == k { 1.0 } else { 0.0 }), false),
            Expr::Add(a, b) => {
                let (da, wa) = a.diff(k, weak_loci);
                let (db, wb) = b.diff(k, weak_loci);
                (add(da, db), wa || wb)
            }
            Expr::Sub(a, b) => {
                let (da, wa) = a.diff(k, weak_loci);
                let (db, wb) = b.diff(k, weak_loci);
                (sub(da, db), wa || wb)
            }
            Expr::Mul(a, b) => {
                let (da, wa) = a.diff(k, weak_loci);
                let (db, wb) = b.diff(k, weak_loci);
                (
                    add(mul(da, (**b).clone()), mul((**a).clone(), db)),
                    wa || wb,
                )
            }
            Expr::Div(a, b) => {
                let (da, wa) = a.diff(k, weak_loci);
                let (db, wb) = b.diff(k, weak_loci);
                let num = sub(mul(da, (**b).clone()), mul((**a).clone(), db));
                (div(num, pow((**b).clone(), 2)), wa || wb)
            }
            Expr::Pow(a, m) => {
                let (da, wa) = a.diff(k, weak_loci);
                (
                    mul(mul(Expr::Const(f64::from(*m)), pow((**a).clone(), m - 1)), da),
                    wa,
                )
            }
            Expr::Powf(a, r) => {
                // |u|^r and ||u||^r coincide, so differentiate through an
                // Abs base directly; recursing would add a sign(abs(u))
                // factor that is redundant almost everywhere.
                let inner: &Expr = match &**a {
                    Expr::Abs(u) => u,
                    other => other,
                };
                let (di, wi) = inner.diff(k, weak_loci);
                if matches!(di, Expr::Const(c) if c == 0.0) {
                    return (Expr::Const(0.0), wi);
                }
                weak_loci.push(inner.clone());
                let d = mul(
                    mul(
                        mul(Expr::Const(*r), powf((**a).clone(), r - 1.0)),
                        sign(inner.clone()),
                    ),
                    di,
                );
                (d, true)
            }
            Expr::Neg(a) => {
                let (da, wa) = a.diff(k, weak_loci);
                (neg(da), wa)
            }
            Expr::Sin(a) => {
                let (da, wa) = a.diff(k, weak_loci);
                (mul(cos((**a).clone()), da), wa)
            }
            Expr::Cos(a) => {
                let (da, wa) = a.diff(k, weak_loci);
                (neg(mul(sin((**a).clone()), da)), wa)
            }
            Expr::Exp(a) => {
                let (da, wa) = a.diff(k, weak_loci);
                (mul(exp((**a).clone()), da), wa)
            }
            Expr::Abs(a) => {
                let (da, wa) = a.diff(k, weak_loci);
                if matches!(da, Expr::Const(c) if c == 0.0) {
                    return (Expr::Const(0.0), wa);
                }
                weak_loci.push((**a).clone());
                (mul(sign((**a).clone()), da), true)
            }
            Expr::Sign(a) => {
                // sign' = 0 almost everywhere; the jump at zero is recorded.
                if self.depends_on(k) {
                    weak_loci.push((**a).clone());
                    (Expr::Const(0.0), true)
                } else {
                    (Expr::Const(0.0), false)
                }
            }
        }
    }

    fn substitute(&self, subs: &[Expr]) -> Expr {
        match self {
            Expr::Const(c) => Expr::Const(*c),
            Expr::Var(i) => subs[*i - 1].clone(),
            Expr::Add(a, b) => add(a.substitute(subs), b.substitute(subs)),
            Expr::Sub(a, b) => sub(a.substitute(subs), b.substitute(subs)),
            Expr::Mul(a, b) => mul(a.substitute(subs), b.substitute(subs)),
            Expr::Div(a, b) => div(a.substitute(subs), b.substitute(subs)),
            Expr::Pow(a, m) => pow(a.substitute(subs), *m),
            Expr::Powf(a, r) => powf(a.substitute(subs), *r),
            Expr::Neg(a) => neg(a.substitute(subs)),
            Expr::Sin(a) => sin(a.substitute(subs)),
            Expr::Cos(a) => cos(a.substitute(subs)),
            Expr::Exp(a) => exp(a.substitute(subs)),
            Expr::Abs(a) => abs(a.substitute(subs)),
            Expr::Sign(a) => sign(a.substitute(subs)),
        }
    }

    fn collect_denominators<'a>(&'a self, out: &mut Vec<&'a Expr>) {
        match self {
            Expr::Const(_) | Expr::Var(_) => {}
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => {
                a.collect_denominators(out);
                b.collect_denominators(out);
            }
            Expr::Div(a, b) => {
                a.collect_denominators(out);
                b.collect_denominators(out);
                out.push(b);
            }
            Expr::Pow(a, _) | Expr::Powf(a, _) => a.collect_denominators(out),
            Expr::Neg(a) | Expr::Sin(a) | Expr::Cos(a) | Expr::Exp(a) | Expr::Abs(a)
            | Expr::Sign(a) => a.collect_denominators(out),
        }
    }
}

// ---------------------------------------------------------------------------
// Printer. Parenthesization mirrors the grammar so printing then parsing is
// the identity on canonical trees.
// ---------------------------------------------------------------------------

fn fmt_const(c: f64) -> String {
    format!("{c}")
}

/// Real exponents must re-parse as real, so integral values keep a `.0`.
fn fmt_real_exponent(r: f64) -> String {
    if r.fract() == 0.0 && r.is_finite() {
        format!("{r:.1}")
    } else {
        format!("{r}")
    }
}

fn is_atom(e: &Expr) -> bool {
    match e {
        Expr::Var(_)
        | Expr::Sin(_)
        | Expr::Cos(_)
        | Expr::Exp(_)
        | Expr::Abs(_)
        | Expr::Sign(_) => true,
        Expr::Const(c) => *c >= 0.0,
        Expr::Neg(inner) => is_atom(inner),
        _ => false,
    }
}

fn print_expr(e: &Expr, out: &mut String) {
    match e {
        Expr::Add(a, b) => {
            print_expr(a, out);
            out.push('+');
            print_term_operand(b, out);
        }
        Expr::Sub(a, b) => {
            print_expr(a, out);
            out.push('-');
            print_term_operand(b, out);
        }
        _ => print_term(e, out),
    }
}

/// Right operand of `+`/`-`: a full term; additive nodes need parens to keep
/// left associativity.
fn print_term_operand(e: &Expr, out: &mut String) {
    if matches!(e, Expr::Add(..) | Expr::Sub(..)) {
        out.push('(');
        print_expr(e, out);
        out.push(')');
    } else {
        print_term(e, out);
    }
}

fn print_term(e: &Expr, out: &mut String) {
    match e {
        Expr::Mul(a, b) => {
            print_term(a, out);
            out.push('*');
            print_factor_operand(b, out);
        }
        Expr::Div(a, b) => {
            print_term(a, out);
            out.push('/');
            print_factor_operand(b, out);
        }
        _ => print_factor(e, out),
    }
}

fn print_factor_operand(e: &Expr, out: &mut String) {
    if matches!(e, Expr::Add(..) | Expr::Sub(..) | Expr::Mul(..) | Expr::Div(..)) {
        out.push('(');
        print_expr(e, out);
        out.push(')');
    } else {
        print_factor(e, out);
    }
}

fn print_factor(e: &Expr, out: &mut String) {
    match e {
        Expr::Pow(base, k) => {
            print_pow_base(base, out);
            out.push('^');
            out.push_str(&k.to_string());
        }
        Expr::Powf(base, r) => {
            print_pow_base(base, out);
            out.push('^');
            out.push_str(&fmt_real_exponent(*r));
        }
        _ => print_atom(e, out),
    }
}

fn print_pow_base(e: &Expr, out: &mut String) {
    if is_atom(e) {
        print_atom(e, out);
    } else {
        out.push('(');
        print_expr(e, out);
        out.push(')');
    }
}

fn print_atom(e: &Expr, out: &mut String) {
    match e {
        Expr::Const(c) => {
            if *c < 0.0 {
                // Negative constants re-parse through the unary-minus rule.
                out.push('-');
                out.push_str(&fmt_const(-*c));
            } else {
                out.push_str(&fmt_const(*c));
            }
        }
        Expr::Var(i) => {
            out.push('x');
            out.push_str(&i.to_string());
        }
        Expr::Neg(a) => {
            out.push('-');
            print_atom_or_paren(a, out);
        }
        Expr::Sin(a) => print_call("sin", a, out),
        Expr::Cos(a) => print_call("cos", a, out),
        Expr::Exp(a) => print_call("exp", a, out),
        Expr::Abs(a) => print_call("abs", a, out),
        Expr::Sign(a) => print_call("sign", a, out),
        _ => {
            out.push('(');
            print_expr(e, out);
            out.push(')');
        }
    }
}

fn print_atom_or_paren(e: &Expr, out: &mut String) {
    if is_atom(e) {
        print_atom(e, out);
    } else {
        out.push('(');
        print_expr(e, out);
        out.push(')');
    }
}

fn print_call(name: &str, arg: &Expr, out: &mut String) {
    out.push_str(name);
    out.push('(');
    print_expr(arg, out);
    out.push(')');
}

// ---------------------------------------------------------------------------
// Parser: recursive descent over a byte cursor, columns are 1-based.
// ---------------------------------------------------------------------------

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    n: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str, n: usize) -> Self {
        Parser {
            src: src.as_bytes(),
            pos: 0,
            n,
        }
    }

    fn col(&self) -> usize {
        self.pos + 1
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.term()?;
        while let Some(c) = self.peek() {
            match c {
                b'+' => {
                    self.pos += 1;
                    acc = add(acc, self.term()?);
                }
                b'-' => {
                    self.pos += 1;
                    acc = sub(acc, self.term()?);
                }
                _ => break,
            }
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.factor()?;
        while let Some(c) = self.peek() {
            match c {
                b'*' => {
                    self.pos += 1;
                    acc = mul(acc, self.factor()?);
                }
                b'/' => {
                    self.pos += 1;
                    acc = div(acc, self.factor()?);
                }
                _ => break,
            }
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let negated = if self.peek() == Some(b'-') {
                self.pos += 1;
                true
            } else {
                false
            };
            let col = self.col();
            let (value, is_int) = self.number(col)?;
            let value = if negated { -value } else { value };
            if is_int && value.abs() <= f64::from(i32::MAX) {
                return Ok(pow(base, value as i32));
            }
            return Ok(powf(base, value));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let col = self.col();
        match self.peek() {
            None => Err(ParseError::Syntax {
                col: self.col(),
                msg: "expected expression, found end of input".into(),
            }),
            Some(b'-') => {
                self.pos += 1;
                Ok(neg(self.atom()?))
            }
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(b')')?;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                let col = self.col();
                let (value, _) = self.number(col)?;
                Ok(Expr::Const(value))
            }
            Some(c) if c.is_ascii_alphabetic() => self.identifier(col),
            Some(c) => Err(ParseError::Syntax {
                col,
                msg: format!("unexpected character `{}`", c as char),
            }),
        }
    }

    fn expect(&mut self, want: u8) -> Result<(), ParseError> {
        if self.peek() == Some(want) {
            self.pos += 1;
            Ok(())
        } else {
            Err(ParseError::Syntax {
                col: self.col(),
                msg: format!("expected `{}`", want as char),
            })
        }
    }

    /// Parses a number literal; the flag reports whether it was written as a
    /// plain integer (no decimal point, no exponent).
    fn number(&mut self, col: usize) -> Result<(f64, bool), ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        let mut is_int = self.pos > start;
        if self.pos < self.src.len() && self.src[self.pos] == b'.' {
            is_int = false;
            self.pos += 1;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        if self.pos > start
            && self.pos < self.src.len()
            && (self.src[self.pos] == b'e' || self.src[self.pos] == b'E')
        {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < self.src.len() && (self.src[self.pos] == b'+' || self.src[self.pos] == b'-')
            {
                self.pos += 1;
            }
            if self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                is_int = false;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                self.pos = mark;
            }
        }
        if self.pos == start {
            return Err(ParseError::Syntax {
                col,
                msg: "expected number".into(),
            });
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
        let value: f64 = text.parse().map_err(|_| ParseError::Syntax {
            col,
            msg: format!("malformed number `{text}`"),
        })?;
        Ok((value, is_int))
    }

    fn identifier(&mut self, col: usize) -> Result<Expr, ParseError> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii identifier");
        if let Some(digits) = name.strip_prefix('x') {
            if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
                let index: usize = digits.parse().map_err(|_| ParseError::Syntax {
                    col,
                    msg: format!("malformed variable `{name}`"),
                })?;
                if index == 0 || index > self.n {
                    return Err(ParseError::VarIndex { index, n: self.n });
                }
                return Ok(Expr::Var(index));
            }
        }
        let func: fn(Expr) -> Expr = match name {
            "sin" => sin,
            "cos" => cos,
            "exp" => exp,
            "abs" => abs,
            "sign" => sign,
            _ => {
                return Err(ParseError::UnknownIdentifier {
                    name: name.to_string(),
                    col,
                })
            }
        };
        self.expect(b'(')?;
        let arg = self.expr()?;
        self.expect(b')')?;
        Ok(func(arg))
    }
}

/// Parses `text` as an expression over `x1..xn`.
pub fn parse_field_expr(text: &str, n: usize) -> Result<FieldExpr, ParseError> {
    let mut p = Parser::new(text, n);
    let ast = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(ParseError::Syntax {
            col: p.col(),
            msg: "trailing input".into(),
        });
    }
    Ok(FieldExpr {
        n,
        ast,
        weak: false,
        weak_loci: Vec::new(),
    })
}

/// A scalar coefficient expression over `x1..xn`.
///
/// Immutable after construction; evaluation is a pure tree walk, so values are
/// reproducible bit-for-bit and instances can be shared across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldExpr {
    n: usize,
    ast: Expr,
    weak: bool,
    weak_loci: Vec<Expr>,
}

impl FieldExpr {
    /// Builds directly from an AST, e.g. assembled through [`Expr`] matching.
    pub fn from_ast(ast: Expr, n: usize) -> Result<Self, FieldError> {
        let max = ast.max_var();
        if max > n {
            return Err(ParseError::VarIndex { index: max, n }.into());
        }
        Ok(FieldExpr {
            n,
            ast,
            weak: false,
            weak_loci: Vec::new(),
        })
    }

    pub fn constant(c: f64, n: usize) -> Self {
        FieldExpr {
            n,
            ast: Expr::Const(c),
            weak: false,
            weak_loci: Vec::new(),
        }
    }

    pub fn var(i: usize, n: usize) -> Self {
        assert!(i >= 1 && i <= n, "variable index out of range");
        FieldExpr {
            n,
            ast: Expr::Var(i),
            weak: false,
            weak_loci: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn ast(&self) -> &Expr {
        &self.ast
    }

    /// True when this expression is a derivative that passed through a kink
    /// and is therefore only valid almost everywhere.
    pub fn weak(&self) -> bool {
        self.weak
    }

    /// Inner expressions whose zero sets are the weak-derivative loci.
    pub fn weak_loci(&self) -> &[Expr] {
        &self.weak_loci
    }

    /// Denominator subexpressions; each carries an implicit nonvanishing
    /// requirement on the working domain.
    pub fn division_denominators(&self) -> Vec<String> {
        let mut dens = Vec::new();
        self.ast.collect_denominators(&mut dens);
        dens.iter().map(|d| print_to_string(d)).collect()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.n);
        self.ast.eval(x)
    }

    /// Symbolic partial derivative with respect to `x_k` (1-based).
    pub fn differentiate(&self, k: usize) -> FieldExpr {
        assert!(k >= 1 && k <= self.n, "derivative index out of range");
        let mut loci = self.weak_loci.clone();
        let (ast, weak) = self.ast.diff(k, &mut loci);
        FieldExpr {
            n: self.n,
            ast,
            weak: self.weak || weak,
            weak_loci: loci,
        }
    }

    /// Replaces `x_i` by `subs[i-1]`; all substitutes must share a dimension,
    /// which becomes the dimension of the result.
    pub fn substitute(&self, subs: &[FieldExpr]) -> Result<FieldExpr, FieldError> {
        if subs.len() != self.n {
            return Err(FieldError::DimensionMismatch {
                expr_n: self.n,
                n: subs.len(),
            });
        }
        let m = subs[0].n;
        for s in subs {
            if s.n != m {
                return Err(FieldError::DimensionMismatch { expr_n: s.n, n: m });
            }
        }
        let asts: Vec<Expr> = subs.iter().map(|s| s.ast.clone()).collect();
        Ok(FieldExpr {
            n: m,
            ast: self.ast.substitute(&asts),
            weak: self.weak || subs.iter().any(|s| s.weak),
            weak_loci: Vec::new(),
        })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.ast, Expr::Const(c) if c == 0.0)
    }

    fn combine(self, other: FieldExpr, op: fn(Expr, Expr) -> Expr) -> FieldExpr {
        assert_eq!(self.n, other.n, "combined expressions must share a dimension");
        let mut loci = self.weak_loci;
        loci.extend(other.weak_loci);
        FieldExpr {
            n: self.n,
            ast: op(self.ast, other.ast),
            weak: self.weak || other.weak,
            weak_loci: loci,
        }
    }

    pub fn scale(self, c: f64) -> FieldExpr {
        FieldExpr {
            n: self.n,
            ast: mul(Expr::Const(c), self.ast),
            weak: self.weak,
            weak_loci: self.weak_loci,
        }
    }
}

impl std::ops::Add for FieldExpr {
    type Output = FieldExpr;
    fn add(self, rhs: FieldExpr) -> FieldExpr {
        self.combine(rhs, add)
    }
}

impl std::ops::Sub for FieldExpr {
    type Output = FieldExpr;
    fn sub(self, rhs: FieldExpr) -> FieldExpr {
        self.combine(rhs, sub)
    }
}

impl std::ops::Mul for FieldExpr {
    type Output = FieldExpr;
    fn mul(self, rhs: FieldExpr) -> FieldExpr {
        self.combine(rhs, mul)
    }
}

impl std::ops::Div for FieldExpr {
    type Output = FieldExpr;
    fn div(self, rhs: FieldExpr) -> FieldExpr {
        self.combine(rhs, div)
    }
}

impl std::ops::Neg for FieldExpr {
    type Output = FieldExpr;
    fn neg(self) -> FieldExpr {
        FieldExpr {
            n: self.n,
            ast: neg(self.ast),
            weak: self.weak,
            weak_loci: self.weak_loci,
        }
    }
}

fn print_to_string(e: &Expr) -> String {
    let mut out = String::new();
    print_expr(e, &mut out);
    out
}

impl std::fmt::Display for FieldExpr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&print_to_string(&self.ast))
    }
}

impl Serialize for FieldExpr {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

/// Closed ball in ambient coordinates; the working domain of a field family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Vec<f64>, radius: f64) -> Self {
        Ball { center, radius }
    }

    pub fn unit(n: usize) -> Self {
        Ball {
            center: vec![0.0; n],
            radius: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        dist2(x, &self.center) <= self.radius * self.radius
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// A family of `q` vector fields on an `n`-dimensional ball, each given by
/// `n` symbolic coefficient expressions.
///
/// Immutable after construction; safe to evaluate concurrently.
#[derive(Debug, Clone)]
pub struct FieldSet {
    n: usize,
    q: usize,
    /// Row-major: coefficient `k` of field `j` at `j * n + k`.
    coeffs: Vec<FieldExpr>,
    pub domain: Ball,
}

impl FieldSet {
    pub fn new(coeffs: Vec<Vec<FieldExpr>>, domain: Ball) -> Result<Self, FieldError> {
        let q = coeffs.len();
        let n = domain.dim();
        if q < n || n < 1 {
            return Err(FieldError::BadShape { q, n });
        }
        let mut flat = Vec::with_capacity(q * n);
        for (j, row) in coeffs.into_iter().enumerate() {
            if row.len() != n {
                return Err(FieldError::BadRow {
                    field: j + 1,
                    comp: 0,
                    found: row.len(),
                    n,
                });
            }
            for e in &row {
                if e.n != n {
                    return Err(FieldError::DimensionMismatch { expr_n: e.n, n });
                }
            }
            flat.extend(row);
        }
        let set = FieldSet {
            n,
            q,
            coeffs: flat,
            domain,
        };
        set.check_domain()?;
        Ok(set)
    }

    /// Parses each coefficient string; `rows[j][k]` is coefficient `k` of
    /// field `j`.
    pub fn parse(rows: &[Vec<&str>], domain: Ball) -> Result<Self, FieldError> {
        let n = domain.dim();
        let mut coeffs = Vec::with_capacity(rows.len());
        for row in rows {
            let mut parsed = Vec::with_capacity(row.len());
            for text in row {
                parsed.push(parse_field_expr(text, n)?);
            }
            coeffs.push(parsed);
        }
        FieldSet::new(coeffs, domain)
    }

    /// Spot-checks that every coefficient stays finite on a deterministic
    /// sample of the domain. A sampled check, not a proof: it guards against
    /// divisions that blow up on the stated ball.
    fn check_domain(&self) -> Result<(), FieldError> {
        let mut points = vec![self.domain.center.clone()];
        for k in 0..self.n {
            for s in [-0.99, -0.5, 0.5, 0.99] {
                let mut p = self.domain.center.clone();
                p[k] += s * self.domain.radius;
                points.push(p);
            }
        }
        // Low-discrepancy diagonal sweep to cover mixed coordinates.
        for i in 1..=16usize {
            let mut p = self.domain.center.clone();
            for (k, pk) in p.iter_mut().enumerate() {
                let frac = ((i * (2 * k + 3)) % 17) as f64 / 17.0;
                *pk += (2.0 * frac - 1.0) * self.domain.radius / (self.n as f64).sqrt();
            }
            points.push(p);
        }
        for point in &points {
            for j in 0..self.q {
                for k in 0..self.n {
                    let v = self.coeff(j, k).eval(point);
                    if !v.is_finite() {
                        return Err(FieldError::UndefinedOnDomain {
                            field: j + 1,
                            comp: k + 1,
                            point: point.clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Coefficient `k` (0-based) of field `j` (0-based).
    pub fn coeff(&self, j: usize, k: usize) -> &FieldExpr {
        &self.coeffs[j * self.n + k]
    }

    /// Components of field `j` at `x`.
    pub fn eval_field(&self, j: usize, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|k| self.coeff(j, k).eval(x)).collect()
    }

    /// The n-by-q matrix whose column `j` is field `j` at `x`.
    pub fn field_matrix(&self, x: &[f64]) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.n, self.q, |k, j| self.coeff(j, k).eval(x))
    }

    /// Velocity of the control combination `sum_j a_j X_j` at `x`, written
    /// into `out`.
    pub fn combination_into(&self, a: &[f64], x: &[f64], out: &mut [f64]) {
        for k in 0..self.n {
            let mut acc = 0.0;
            for (j, aj) in a.iter().enumerate() {
                if *aj != 0.0 {
                    acc += *aj * self.coeff(j, k).eval(x);
                }
            }
            out[k] = acc;
        }
    }

    /// True if any coefficient carries a weak-derivative flag.
    pub fn any_weak(&self) -> bool {
        self.coeffs.iter().any(|e| e.weak)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn parse(text: &str, n: usize) -> FieldExpr {
        parse_field_expr(text, n).expect(text)
    }

    #[test]
    fn evaluates_products() {
        let e = parse("x1*x2", 2);
        assert_eq!(e.eval(&[3.0, 4.0]), 12.0);
    }

    #[test]
    fn rotation_coefficients() {
        let ex = parse("-x2", 2);
        let ey = parse("x1", 2);
        assert_eq!(ex.eval(&[1.0, 2.0]), -2.0);
        assert_eq!(ey.eval(&[1.0, 2.0]), 1.0);
    }

    #[test]
    fn dangling_caret_is_a_syntax_error_with_position() {
        let err = parse_field_expr("x1^", 1).unwrap_err();
        match err {
            ParseError::Syntax { col, .. } => assert_eq!(col, 4),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_out_of_range_variables() {
        let err = parse_field_expr("x3+1", 2).unwrap_err();
        assert_eq!(err, ParseError::VarIndex { index: 3, n: 2 });
    }

    #[test]
    fn rejects_unknown_identifiers() {
        let err = parse_field_expr("tan(x1)", 1).unwrap_err();
        match err {
            ParseError::UnknownIdentifier { name, col } => {
                assert_eq!(name, "tan");
                assert_eq!(col, 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn product_rule_folds_cleanly() {
        let e = parse("x1^2*x2", 2);
        let d = e.differentiate(1);
        assert_eq!(d.to_string(), "2*x1*x2");
        assert!(!d.weak());
    }

    #[test]
    fn sine_derivative() {
        let e = parse("sin(x2)", 2);
        let d = e.differentiate(2);
        assert_eq!(d.to_string(), "cos(x2)");
    }

    #[test]
    fn abs_power_derivative_is_weak_and_matches_central_differences() {
        let e = parse("abs(x1)^2.6", 1);
        let d = e.differentiate(1);
        assert!(d.weak());
        assert_eq!(d.to_string(), "2.6*abs(x1)^1.6*sign(x1)");
        assert_eq!(d.weak_loci().len(), 1);
        let h = 1e-5;
        for x in [0.3, -0.3] {
            let fd = (e.eval(&[x + h]) - e.eval(&[x - h])) / (2.0 * h);
            let sym = d.eval(&[x]);
            assert_relative_eq!(sym, fd, max_relative = 1e-6);
        }
        // 2.6*abs(x)^1.6*sign(x) by hand at 0.3.
        let expect = 2.6 * 0.3f64.powf(1.6);
        assert_relative_eq!(d.eval(&[0.3]), expect, max_relative = 1e-12);
    }

    #[test]
    fn derivative_matches_central_differences_on_a_corpus() {
        let corpus = [
            "x1*x2+sin(x1*x2)",
            "exp(x1/2)-x2^3",
            "(x1+2*x2)/(3+x1^2)",
            "cos(x1)*cos(x2)+x1^4",
            "abs(x1)^1.3+x2*x1",
        ];
        let pts = [[0.37, -0.51], [0.91, 0.23], [-0.44, 0.67]];
        let h = 1e-5;
        for text in corpus {
            let e = parse(text, 2);
            for k in 1..=2usize {
                let d = e.differentiate(k);
                for p in pts {
                    let mut hi = p;
                    let mut lo = p;
                    hi[k - 1] += h;
                    lo[k - 1] -= h;
                    let fd = (e.eval(&hi) - e.eval(&lo)) / (2.0 * h);
                    let sym = d.eval(&p);
                    if fd.abs() > 1e-8 {
                        assert_relative_eq!(sym, fd, max_relative = 1e-5);
                    } else {
                        assert!((sym - fd).abs() < 1e-7);
                    }
                }
            }
        }
    }

    #[test]
    fn print_parse_round_trip_on_samples() {
        let samples = [
            "x1*x2+sin(x1*x2)",
            "-(x1^2)",
            "-x1^2",
            "x1-(x2-x1)",
            "x1/(x2*x1)/3",
            "abs(x1)^2.6",
            "x1^-2",
            "2.5*exp(-x1)",
            "sign(x2)*abs(x1)^0.5",
        ];
        for text in samples {
            let e = parse(text, 2);
            let printed = e.to_string();
            let reparsed = parse(&printed, 2);
            assert_eq!(e.ast(), reparsed.ast(), "round trip failed for {text}: printed {printed}");
        }
    }

    #[test]
    fn real_power_uses_absolute_base() {
        let e = parse("x1^2.6", 1);
        assert_relative_eq!(e.eval(&[-0.5]), 0.5f64.powf(2.6), max_relative = 1e-15);
        let i = parse("x1^3", 1);
        assert_eq!(i.eval(&[-0.5]), -0.125);
    }

    #[test]
    fn substitution_composes_affinely() {
        let e = parse("x1^2+x2", 2);
        let s1 = parse("2*x1+1", 2);
        let s2 = parse("x2-3", 2);
        let composed = e.substitute(&[s1, s2]).unwrap();
        let x = [0.7, 1.9];
        let direct = (2.0 * x[0] + 1.0f64).powi(2) + (x[1] - 3.0);
        assert_relative_eq!(composed.eval(&x), direct, max_relative = 1e-15);
    }

    #[test]
    fn division_denominators_are_reported() {
        let e = parse("x1/(1+x2^2)", 2);
        assert_eq!(e.division_denominators(), vec!["1+x2^2".to_string()]);
    }

    #[test]
    fn field_set_rejects_bad_shapes() {
        let d = Ball::unit(2);
        let err = FieldSet::parse(&[vec!["1", "0"]], d).unwrap_err();
        assert!(matches!(err, FieldError::BadShape { q: 1, n: 2 }));
    }

    #[test]
    fn field_set_rejects_domain_blowups() {
        let d = Ball::unit(1);
        let err = FieldSet::parse(&[vec!["1/x1"]], d).unwrap_err();
        assert!(matches!(err, FieldError::UndefinedOnDomain { .. }));
    }

    #[test]
    fn field_matrix_lays_out_columns() {
        let d = Ball::new(vec![0.0, 0.0], 5.0);
        let fs = FieldSet::parse(
            &[vec!["1", "0"], vec!["0", "1"], vec!["0", "x1"]],
            d,
        )
        .unwrap();
        let m = fs.field_matrix(&[3.0, 1.0]);
        assert_eq!(m[(0, 0)], 1.0);
        assert_eq!(m[(1, 2)], 3.0);
        assert_eq!(m[(0, 2)], 0.0);
    }
}
