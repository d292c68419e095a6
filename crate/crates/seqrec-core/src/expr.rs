//! Expression trees for recurrence relations, their prefix (Polish) text form,
//! and exact evaluation semantics for integer and float sequences.
//!
//! An [`Expr`] is an immutable unary-binary tree whose leaves are constants,
//! the running index `n`, prior terms `u_{n-i}`, or the stochastic leaf `xi`.
//! A [`RecurrenceRelation`] bundles one expression per dimension and can be
//! unrolled from initial terms into a concrete sequence.
//!
//! Integer arithmetic is exact (arbitrary precision); `mod` and `intdiv` use
//! floored semantics, i.e. the remainder follows the sign of the divisor.
//! Unrolling stops with a domain error whenever a term is undefined or its
//! magnitude exceeds `10^100`.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Deepest prior-term offset an expression may reference.
pub const MAX_DEGREE: usize = 6;
/// Maximum number of interdependent dimensions.
pub const MAX_DIMS: usize = 3;
/// Terms are bounded by `10^MAX_MAGNITUDE_EXP` in absolute value.
pub const MAX_MAGNITUDE_EXP: u32 = 100;

/// Whether a relation lives over exact integers or doubles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Integer,
    Float,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Integer => write!(f, "integer"),
            Mode::Float => write!(f, "float"),
        }
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "integer" | "int" => Ok(Mode::Integer),
            "float" => Ok(Mode::Float),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// Operators available to the generators, split by arity and numeric domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    // unary, integer
    Abs,
    Sqr,
    Sign,
    Relu,
    // unary, float only
    Sqrt,
    Inv,
    Log,
    Exp,
    Sin,
    Cos,
    Tan,
    Atan,
    // binary, shared
    Add,
    Sub,
    Mul,
    // binary, split by domain
    Div,
    IntDiv,
    Mod,
}

/// Unary operators of the integer set.
pub const INTEGER_UNARY: &[Op] = &[Op::Abs, Op::Sqr, Op::Sign, Op::Relu];
/// Binary operators of the integer set.
pub const INTEGER_BINARY: &[Op] = &[Op::Add, Op::Sub, Op::Mul, Op::IntDiv, Op::Mod];
/// Unary operators of the float set.
pub const FLOAT_UNARY: &[Op] = &[
    Op::Abs,
    Op::Sqr,
    Op::Sqrt,
    Op::Inv,
    Op::Log,
    Op::Exp,
    Op::Sin,
    Op::Cos,
    Op::Tan,
    Op::Atan,
];
/// Binary operators of the float set.
pub const FLOAT_BINARY: &[Op] = &[Op::Add, Op::Sub, Op::Mul, Op::Div];

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::Abs => "abs",
            Op::Sqr => "sqr",
            Op::Sign => "sign",
            Op::Relu => "relu",
            Op::Sqrt => "sqrt",
            Op::Inv => "inv",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Tan => "tan",
            Op::Atan => "atan",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::IntDiv => "intdiv",
            Op::Mod => "mod",
        }
    }

    pub fn from_name(name: &str) -> Option<Op> {
        Some(match name {
            "abs" => Op::Abs,
            "sqr" => Op::Sqr,
            "sign" => Op::Sign,
            "relu" => Op::Relu,
            "sqrt" => Op::Sqrt,
            "inv" => Op::Inv,
            "log" => Op::Log,
            "exp" => Op::Exp,
            "sin" => Op::Sin,
            "cos" => Op::Cos,
            "tan" => Op::Tan,
            "atan" => Op::Atan,
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "div" => Op::Div,
            "intdiv" => Op::IntDiv,
            "mod" => Op::Mod,
            _ => return None,
        })
    }

    pub fn arity(self) -> usize {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::IntDiv | Op::Mod => 2,
            _ => 1,
        }
    }

    pub fn in_mode(self, mode: Mode) -> bool {
        match mode {
            Mode::Integer => INTEGER_UNARY.contains(&self) || INTEGER_BINARY.contains(&self),
            Mode::Float => FLOAT_UNARY.contains(&self) || FLOAT_BINARY.contains(&self),
        }
    }

    pub fn unary_set(mode: Mode) -> &'static [Op] {
        match mode {
            Mode::Integer => INTEGER_UNARY,
            Mode::Float => FLOAT_UNARY,
        }
    }

    pub fn binary_set(mode: Mode) -> &'static [Op] {
        match mode {
            Mode::Integer => INTEGER_BINARY,
            Mode::Float => FLOAT_BINARY,
        }
    }
}

/// A constant leaf value. `Real` only appears when the generator samples
/// uniform real prefactors; it never enters the token vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Constant {
    Int(i64),
    E,
    Pi,
    Gamma,
    Real(f64),
}

/// Euler-Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

impl Constant {
    pub fn as_f64(self) -> f64 {
        match self {
            Constant::Int(v) => v as f64,
            Constant::E => std::f64::consts::E,
            Constant::Pi => std::f64::consts::PI,
            Constant::Gamma => EULER_GAMMA,
            Constant::Real(v) => v,
        }
    }

    pub fn token(self) -> String {
        match self {
            Constant::Int(v) => v.to_string(),
            Constant::E => "e".to_string(),
            Constant::Pi => "pi".to_string(),
            Constant::Gamma => "gamma".to_string(),
            Constant::Real(v) => format!("{v:?}"),
        }
    }
}

/// Expression leaves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Leaf {
    Const(Constant),
    /// The running index `n`.
    Index,
    /// Prior term `u_{n-offset}` of the given dimension (`1 <= offset <= MAX_DEGREE`).
    Prior { dim: usize, offset: usize },
    /// Stochastic leaf `xi ~ N(0,1)`.
    Noise,
}

const DIM_LETTERS: [char; MAX_DIMS] = ['u', 'v', 'w'];

impl Leaf {
    pub fn token(&self) -> String {
        match self {
            Leaf::Const(c) => c.token(),
            Leaf::Index => "n".to_string(),
            Leaf::Prior { dim, offset } => format!("{}{}", DIM_LETTERS[*dim], offset),
            Leaf::Noise => "xi".to_string(),
        }
    }
}

/// An immutable operator tree. Construction via [`Expr::unary`] / [`Expr::binary`]
/// guarantees child counts match operator arity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Leaf(Leaf),
    Unary(Op, Box<Expr>),
    Binary(Op, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn leaf(leaf: Leaf) -> Expr {
        Expr::Leaf(leaf)
    }

    pub fn constant(v: i64) -> Expr {
        Expr::Leaf(Leaf::Const(Constant::Int(v)))
    }

    pub fn index() -> Expr {
        Expr::Leaf(Leaf::Index)
    }

    pub fn prior(offset: usize) -> Expr {
        Expr::Leaf(Leaf::Prior { dim: 0, offset })
    }

    pub fn unary(op: Op, child: Expr) -> Expr {
        assert_eq!(op.arity(), 1, "{} is not unary", op.name());
        Expr::Unary(op, Box::new(child))
    }

    pub fn binary(op: Op, lhs: Expr, rhs: Expr) -> Expr {
        assert_eq!(op.arity(), 2, "{} is not binary", op.name());
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    /// Number of internal (operator) nodes.
    pub fn count_ops(&self) -> usize {
        match self {
            Expr::Leaf(_) => 0,
            Expr::Unary(_, c) => 1 + c.count_ops(),
            Expr::Binary(_, l, r) => 1 + l.count_ops() + r.count_ops(),
        }
    }

    /// Deepest prior-term offset actually referenced, 0 if none.
    pub fn effective_degree(&self) -> usize {
        match self {
            Expr::Leaf(Leaf::Prior { offset, .. }) => *offset,
            Expr::Leaf(_) => 0,
            Expr::Unary(_, c) => c.effective_degree(),
            Expr::Binary(_, l, r) => l.effective_degree().max(r.effective_degree()),
        }
    }

    pub fn uses_noise(&self) -> bool {
        match self {
            Expr::Leaf(l) => matches!(l, Leaf::Noise),
            Expr::Unary(_, c) => c.uses_noise(),
            Expr::Binary(_, l, r) => l.uses_noise() || r.uses_noise(),
        }
    }

    /// Largest dimension index referenced by a prior-term leaf, if any.
    pub fn max_dim(&self) -> Option<usize> {
        match self {
            Expr::Leaf(Leaf::Prior { dim, .. }) => Some(*dim),
            Expr::Leaf(_) => None,
            Expr::Unary(_, c) => c.max_dim(),
            Expr::Binary(_, l, r) => l.max_dim().max(r.max_dim()),
        }
    }

    pub fn for_each_op(&self, f: &mut impl FnMut(Op)) {
        match self {
            Expr::Leaf(_) => {}
            Expr::Unary(op, c) => {
                f(*op);
                c.for_each_op(f);
            }
            Expr::Binary(op, l, r) => {
                f(*op);
                l.for_each_op(f);
                r.for_each_op(f);
            }
        }
    }

    pub fn for_each_leaf(&self, f: &mut impl FnMut(&Leaf)) {
        match self {
            Expr::Leaf(l) => f(l),
            Expr::Unary(_, c) => c.for_each_leaf(f),
            Expr::Binary(_, l, r) => {
                l.for_each_leaf(f);
                r.for_each_leaf(f);
            }
        }
    }

    /// Prefix (Polish) token form; the inverse of [`parse_prefix`].
    pub fn to_prefix(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.push_prefix(&mut out);
        out
    }

    fn push_prefix(&self, out: &mut Vec<String>) {
        match self {
            Expr::Leaf(l) => out.push(l.token()),
            Expr::Unary(op, c) => {
                out.push(op.name().to_string());
                c.push_prefix(out);
            }
            Expr::Binary(op, l, r) => {
                out.push(op.name().to_string());
                l.push_prefix(out);
                r.push_prefix(out);
            }
        }
    }

    /// Human-readable infix form, e.g. `(2 * u[n-1]) % 100`.
    pub fn to_infix(&self) -> String {
        match self {
            Expr::Leaf(Leaf::Const(c)) => c.token(),
            Expr::Leaf(Leaf::Index) => "n".to_string(),
            Expr::Leaf(Leaf::Prior { dim, offset }) => {
                format!("{}[n-{}]", DIM_LETTERS[*dim], offset)
            }
            Expr::Leaf(Leaf::Noise) => "xi".to_string(),
            Expr::Unary(op, c) => format!("{}({})", op.name(), c.to_infix()),
            Expr::Binary(op, l, r) => {
                let sym = match op {
                    Op::Add => "+",
                    Op::Sub => "-",
                    Op::Mul => "*",
                    Op::Div => "/",
                    Op::IntDiv => "//",
                    Op::Mod => "%",
                    _ => unreachable!(),
                };
                let wrap = |e: &Expr| match e {
                    Expr::Leaf(_) | Expr::Unary(..) => e.to_infix(),
                    Expr::Binary(..) => format!("({})", e.to_infix()),
                };
                format!("{} {} {}", wrap(l), sym, wrap(r))
            }
        }
    }
}

/// Errors raised while parsing a prefix token stream. Any of these marks the
/// token sequence as an invalid expression.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("truncated input: operator is missing operands")]
    Truncated,
    #[error("trailing tokens after position {consumed}")]
    Trailing { consumed: usize },
    #[error("unknown symbol `{token}`")]
    Unknown { token: String },
    #[error("`{token}` is not available in {mode} mode")]
    WrongMode { token: String, mode: Mode },
}

/// Parses a whitespace-free prefix token list into the unique matching tree.
///
/// All tokens must be consumed; operators must belong to `mode`'s operator set.
pub fn parse_prefix<S: AsRef<str>>(tokens: &[S], mode: Mode) -> Result<Expr, ParseError> {
    let mut pos = 0usize;
    let expr = parse_node(tokens, &mut pos, mode)?;
    if pos != tokens.len() {
        return Err(ParseError::Trailing { consumed: pos });
    }
    Ok(expr)
}

fn parse_node<S: AsRef<str>>(tokens: &[S], pos: &mut usize, mode: Mode) -> Result<Expr, ParseError> {
    let Some(tok) = tokens.get(*pos) else {
        return Err(ParseError::Truncated);
    };
    let tok = tok.as_ref();
    *pos += 1;

    if let Some(op) = Op::from_name(tok) {
        if !op.in_mode(mode) {
            return Err(ParseError::WrongMode {
                token: tok.to_string(),
                mode,
            });
        }
        return Ok(match op.arity() {
            1 => Expr::Unary(op, Box::new(parse_node(tokens, pos, mode)?)),
            _ => {
                let lhs = parse_node(tokens, pos, mode)?;
                let rhs = parse_node(tokens, pos, mode)?;
                Expr::Binary(op, Box::new(lhs), Box::new(rhs))
            }
        });
    }

    parse_leaf(tok, mode)
}

fn parse_leaf(tok: &str, mode: Mode) -> Result<Expr, ParseError> {
    match tok {
        "n" => return Ok(Expr::index()),
        "xi" => return Ok(Expr::Leaf(Leaf::Noise)),
        "e" | "pi" | "gamma" => {
            if mode == Mode::Integer {
                return Err(ParseError::WrongMode {
                    token: tok.to_string(),
                    mode,
                });
            }
            let c = match tok {
                "e" => Constant::E,
                "pi" => Constant::Pi,
                _ => Constant::Gamma,
            };
            return Ok(Expr::Leaf(Leaf::Const(c)));
        }
        _ => {}
    }

    // prior-term leaves: u1..u6, v1..v6, w1..w6
    let mut chars = tok.chars();
    if let (Some(letter), rest) = (chars.next(), chars.as_str()) {
        if let Some(dim) = DIM_LETTERS.iter().position(|&c| c == letter) {
            if let Ok(offset) = rest.parse::<usize>() {
                if (1..=MAX_DEGREE).contains(&offset) {
                    return Ok(Expr::Leaf(Leaf::Prior { dim, offset }));
                }
                return Err(ParseError::Unknown {
                    token: tok.to_string(),
                });
            }
        }
    }

    if let Ok(v) = tok.parse::<i64>() {
        return Ok(Expr::constant(v));
    }
    // real literals only occur with uniform-real prefactors, and only in float mode
    if mode == Mode::Float && tok.contains('.') {
        if let Ok(v) = tok.parse::<f64>() {
            if v.is_finite() {
                return Ok(Expr::Leaf(Leaf::Const(Constant::Real(v))));
            }
        }
    }
    Err(ParseError::Unknown {
        token: tok.to_string(),
    })
}

/// A sequence term: exact integer or finite double.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Int(BigInt),
    Float(f64),
}

impl Value {
    pub fn int(v: i64) -> Value {
        Value::Int(BigInt::from(v))
    }

    pub fn to_f64(&self) -> f64 {
        match self {
            Value::Int(v) => v.to_f64().unwrap_or(f64::INFINITY),
            Value::Float(v) => *v,
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Value::Int(v) => v.is_zero(),
            Value::Float(v) => *v == 0.0,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v:?}"),
        }
    }
}

/// `10^100`, the magnitude bound on sequence terms.
pub fn magnitude_limit() -> &'static BigInt {
    static LIMIT: OnceLock<BigInt> = OnceLock::new();
    LIMIT.get_or_init(|| BigInt::from(10u8).pow(MAX_MAGNITUDE_EXP))
}

/// Reasons a term evaluation can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EvalErrorKind {
    #[error("division by zero")]
    DivisionByZero,
    #[error("modulo by zero")]
    ModuloByZero,
    #[error("argument outside function domain")]
    OutOfDomain,
    #[error("magnitude exceeds 10^100")]
    Overflow,
    #[error("non-finite intermediate value")]
    NonFinite,
    #[error("prior term beyond available history")]
    MissingHistory,
    #[error("stochastic leaf evaluated without a noise draw")]
    MissingNoise,
    #[error("value kind does not match evaluation mode")]
    ModeMismatch,
}

/// A failed term evaluation, carrying the sequence position at which it occurred.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} at position {position}")]
pub struct DomainError {
    pub kind: EvalErrorKind,
    /// 0-based position in the sequence (counting initial terms).
    pub position: usize,
}

/// Computes one term `f(n, history)`.
///
/// `history[dim]` holds all known terms of that dimension, the last entry being
/// `u_{n-1}`. A prior-term leaf with offset `i` reads `history[dim][len-i]`.
/// `noise` replaces every `xi` leaf; pass `Some(0.0)` to strip stochasticity.
pub fn eval_step(
    expr: &Expr,
    mode: Mode,
    n: i64,
    history: &[&[Value]],
    noise: Option<f64>,
) -> Result<Value, EvalErrorKind> {
    let v = match mode {
        Mode::Integer => Value::Int(eval_int(expr, n, history, noise)?),
        Mode::Float => Value::Float(eval_float(expr, n, history, noise)?),
    };
    check_magnitude(&v)?;
    Ok(v)
}

fn check_magnitude(v: &Value) -> Result<(), EvalErrorKind> {
    match v {
        Value::Int(x) => {
            if x.abs() > *magnitude_limit() {
                return Err(EvalErrorKind::Overflow);
            }
        }
        Value::Float(x) => {
            if !x.is_finite() {
                return Err(EvalErrorKind::NonFinite);
            }
            if x.abs() > 1e100 {
                return Err(EvalErrorKind::Overflow);
            }
        }
    }
    Ok(())
}

fn prior<'a>(
    history: &'a [&[Value]],
    dim: usize,
    offset: usize,
) -> Result<&'a Value, EvalErrorKind> {
    let h = history.get(dim).ok_or(EvalErrorKind::MissingHistory)?;
    if offset == 0 || offset > h.len() {
        return Err(EvalErrorKind::MissingHistory);
    }
    Ok(&h[h.len() - offset])
}

fn eval_int(
    expr: &Expr,
    n: i64,
    history: &[&[Value]],
    noise: Option<f64>,
) -> Result<BigInt, EvalErrorKind> {
    match expr {
        Expr::Leaf(leaf) => match leaf {
            Leaf::Const(Constant::Int(v)) => Ok(BigInt::from(*v)),
            Leaf::Const(_) => Err(EvalErrorKind::ModeMismatch),
            Leaf::Index => Ok(BigInt::from(n)),
            Leaf::Prior { dim, offset } => match prior(history, *dim, *offset)? {
                Value::Int(v) => Ok(v.clone()),
                Value::Float(_) => Err(EvalErrorKind::ModeMismatch),
            },
            // integer mode rounds the (continuous) draw to the nearest integer
            Leaf::Noise => {
                let draw = noise.ok_or(EvalErrorKind::MissingNoise)?;
                Ok(BigInt::from(draw.round() as i64))
            }
        },
        Expr::Unary(op, c) => {
            let x = eval_int(c, n, history, noise)?;
            Ok(match op {
                Op::Abs => x.abs(),
                Op::Sqr => &x * &x,
                Op::Sign => BigInt::from(x.signum().to_i8().unwrap_or(0)),
                Op::Relu => {
                    if x.is_negative() {
                        BigInt::zero()
                    } else {
                        x
                    }
                }
                _ => return Err(EvalErrorKind::ModeMismatch),
            })
        }
        Expr::Binary(op, l, r) => {
            let a = eval_int(l, n, history, noise)?;
            let b = eval_int(r, n, history, noise)?;
            Ok(match op {
                Op::Add => a + b,
                Op::Sub => a - b,
                Op::Mul => a * b,
                Op::IntDiv => {
                    if b.is_zero() {
                        return Err(EvalErrorKind::DivisionByZero);
                    }
                    a.div_floor(&b)
                }
                Op::Mod => {
                    if b.is_zero() {
                        return Err(EvalErrorKind::ModuloByZero);
                    }
                    a.mod_floor(&b)
                }
                _ => return Err(EvalErrorKind::ModeMismatch),
            })
        }
    }
}

fn eval_float(
    expr: &Expr,
    n: i64,
    history: &[&[Value]],
    noise: Option<f64>,
) -> Result<f64, EvalErrorKind> {
    let v = match expr {
        Expr::Leaf(leaf) => match leaf {
            Leaf::Const(c) => c.as_f64(),
            Leaf::Index => n as f64,
            Leaf::Prior { dim, offset } => match prior(history, *dim, *offset)? {
                Value::Float(v) => *v,
                Value::Int(v) => v.to_f64().ok_or(EvalErrorKind::NonFinite)?,
            },
            Leaf::Noise => noise.ok_or(EvalErrorKind::MissingNoise)?,
        },
        Expr::Unary(op, c) => {
            let x = eval_float(c, n, history, noise)?;
            match op {
                Op::Abs => x.abs(),
                Op::Sqr => x * x,
                Op::Sign => {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
                Op::Relu => x.max(0.0),
                Op::Sqrt => {
                    if x < 0.0 {
                        return Err(EvalErrorKind::OutOfDomain);
                    }
                    x.sqrt()
                }
                Op::Inv => {
                    if x == 0.0 {
                        return Err(EvalErrorKind::DivisionByZero);
                    }
                    1.0 / x
                }
                Op::Log => {
                    if x <= 0.0 {
                        return Err(EvalErrorKind::OutOfDomain);
                    }
                    x.ln()
                }
                Op::Exp => x.exp(),
                Op::Sin => x.sin(),
                Op::Cos => x.cos(),
                Op::Tan => x.tan(),
                Op::Atan => x.atan(),
                _ => return Err(EvalErrorKind::ModeMismatch),
            }
        }
        Expr::Binary(op, l, r) => {
            let a = eval_float(l, n, history, noise)?;
            let b = eval_float(r, n, history, noise)?;
            match op {
                Op::Add => a + b,
                Op::Sub => a - b,
                Op::Mul => a * b,
                Op::Div => {
                    if b == 0.0 {
                        return Err(EvalErrorKind::DivisionByZero);
                    }
                    a / b
                }
                _ => return Err(EvalErrorKind::ModeMismatch),
            }
        }
    };
    if v.is_nan() || v.is_infinite() {
        return Err(EvalErrorKind::NonFinite);
    }
    Ok(v)
}

/// A system of recurrence expressions, one per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceRelation {
    exprs: Vec<Expr>,
}

impl RecurrenceRelation {
    pub fn new(exprs: Vec<Expr>) -> RecurrenceRelation {
        assert!(!exprs.is_empty() && exprs.len() <= MAX_DIMS);
        let dims = exprs.len();
        for e in &exprs {
            if let Some(d) = e.max_dim() {
                assert!(d < dims, "prior-term leaf references missing dimension");
            }
        }
        RecurrenceRelation { exprs }
    }

    pub fn single(expr: Expr) -> RecurrenceRelation {
        RecurrenceRelation::new(vec![expr])
    }

    pub fn exprs(&self) -> &[Expr] {
        &self.exprs
    }

    pub fn dimension(&self) -> usize {
        self.exprs.len()
    }

    /// Effective recursion degree: the deepest prior-term offset present
    /// in any dimension (0 for non-recurrent systems).
    pub fn degree(&self) -> usize {
        self.exprs
            .iter()
            .map(|e| e.effective_degree())
            .max()
            .unwrap_or(0)
    }

    pub fn count_ops(&self) -> usize {
        self.exprs.iter().map(|e| e.count_ops()).sum()
    }

    pub fn uses_noise(&self) -> bool {
        self.exprs.iter().any(|e| e.uses_noise())
    }

    /// Canonical text form: prefix tokens joined by spaces, dimensions joined
    /// by ` | `, e.g. `add u1 n` or `add v1 1 | mul u1 2`.
    pub fn to_text(&self) -> String {
        self.exprs
            .iter()
            .map(|e| e.to_prefix().join(" "))
            .collect::<Vec<_>>()
            .join(" | ")
    }

    pub fn parse_text(text: &str, mode: Mode) -> Result<RecurrenceRelation, ParseError> {
        let exprs = text
            .split('|')
            .map(|part| {
                let tokens: Vec<&str> = part.split_whitespace().collect();
                parse_prefix(&tokens, mode)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RecurrenceRelation::new(exprs))
    }

    pub fn to_infix(&self) -> String {
        self.exprs
            .iter()
            .enumerate()
            .map(|(d, e)| format!("{}[n] = {}", DIM_LETTERS[d], e.to_infix()))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl fmt::Display for RecurrenceRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_text())
    }
}

/// Source of draws for `xi` leaves during unrolling.
pub enum NoiseSource<'a> {
    /// Any `xi` leaf raises [`EvalErrorKind::MissingNoise`].
    Forbid,
    /// `xi` is replaced by its mean 0 (used when scoring extrapolations).
    Mean,
    /// One standard-normal draw per evaluated term.
    Rng(&'a mut dyn rand::RngCore),
}

/// Options for [`unroll`].
pub struct UnrollOpts<'a> {
    /// Index `n` assigned to the first sequence position. Defaults to 0, so the
    /// first computed term of a degree-`d` relation has `n = d`.
    pub first_index: i64,
    pub noise: NoiseSource<'a>,
}

impl Default for UnrollOpts<'_> {
    fn default() -> Self {
        UnrollOpts {
            first_index: 0,
            noise: NoiseSource::Forbid,
        }
    }
}

/// Unrolls `l` new terms per dimension from the given initial terms.
///
/// `initial[dim]` must hold exactly `rel.degree()` terms. The returned
/// sequences include the initial terms, for a total length of `degree + l`.
/// Without noise leaves this is a pure function of its arguments.
pub fn unroll(
    rel: &RecurrenceRelation,
    mode: Mode,
    initial: &[Vec<Value>],
    l: usize,
    mut opts: UnrollOpts<'_>,
) -> Result<Vec<Vec<Value>>, DomainError> {
    let degree = rel.degree();
    assert_eq!(initial.len(), rel.dimension(), "one initial list per dimension");
    for init in initial {
        assert_eq!(init.len(), degree, "initial terms must match relation degree");
    }

    let mut seqs: Vec<Vec<Value>> = initial.to_vec();
    for step in 0..l {
        let position = degree + step;
        let n = opts.first_index + position as i64;
        let mut next = Vec::with_capacity(rel.dimension());
        for expr in rel.exprs() {
            let draw = match &mut opts.noise {
                NoiseSource::Forbid => None,
                NoiseSource::Mean => Some(0.0),
                NoiseSource::Rng(rng) => {
                    Some(rand_distr::Distribution::sample(
                        &rand_distr::StandardNormal,
                        rng,
                    ))
                }
            };
            let history: Vec<&[Value]> = seqs.iter().map(|s| s.as_slice()).collect();
            let v = eval_step(expr, mode, n, &history, draw)
                .map_err(|kind| DomainError { kind, position })?;
            next.push(v);
        }
        for (seq, v) in seqs.iter_mut().zip(next) {
            seq.push(v);
        }
    }
    Ok(seqs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn parse_cos_3n() {
        let e = parse_prefix(&toks("cos mul 3 n"), Mode::Float).unwrap();
        assert_eq!(
            e,
            Expr::unary(
                Op::Cos,
                Expr::binary(Op::Mul, Expr::constant(3), Expr::index())
            )
        );
        assert_eq!(e.count_ops(), 2);
        assert_eq!(e.to_prefix(), vec!["cos", "mul", "3", "n"]);
    }

    #[test]
    fn parse_truncated_is_invalid() {
        assert_eq!(
            parse_prefix(&toks("add 1 mul 2"), Mode::Integer),
            Err(ParseError::Truncated)
        );
    }

    #[test]
    fn parse_trailing_is_invalid() {
        assert_eq!(
            parse_prefix(&toks("add 1 2 7"), Mode::Integer),
            Err(ParseError::Trailing { consumed: 3 })
        );
    }

    #[test]
    fn parse_single_constant() {
        assert_eq!(
            parse_prefix(&toks("5"), Mode::Integer).unwrap(),
            Expr::constant(5)
        );
    }

    #[test]
    fn parse_mode_mismatch() {
        assert!(matches!(
            parse_prefix(&toks("sqrt n"), Mode::Integer),
            Err(ParseError::WrongMode { .. })
        ));
        assert!(matches!(
            parse_prefix(&toks("mod n 2"), Mode::Float),
            Err(ParseError::WrongMode { .. })
        ));
        assert!(matches!(
            parse_prefix(&toks("pi"), Mode::Integer),
            Err(ParseError::WrongMode { .. })
        ));
    }

    #[test]
    fn parse_unknown_symbol() {
        assert!(matches!(
            parse_prefix(&toks("frob"), Mode::Integer),
            Err(ParseError::Unknown { .. })
        ));
        // offsets beyond MAX_DEGREE are not leaf symbols
        assert!(matches!(
            parse_prefix(&toks("u7"), Mode::Integer),
            Err(ParseError::Unknown { .. })
        ));
    }

    #[test]
    fn prefix_round_trip() {
        let text = "add u1 mul sign v2 n | sub v3 xi";
        let rel = RecurrenceRelation::parse_text(text, Mode::Integer).unwrap();
        assert_eq!(rel.to_text(), text);
        assert_eq!(rel.dimension(), 2);
        assert_eq!(rel.degree(), 3);
    }

    #[test]
    fn eval_successor_relation() {
        // u_n = u_{n-1} + n at n=5 with u_4 = 11
        let e = parse_prefix(&toks("add u1 n"), Mode::Integer).unwrap();
        let hist = vec![Value::int(7), Value::int(11)];
        let v = eval_step(&e, Mode::Integer, 5, &[&hist], None).unwrap();
        assert_eq!(v, Value::int(16));
    }

    #[test]
    fn eval_doubling_mod_100() {
        let e = parse_prefix(&toks("mod mul 2 u1 100"), Mode::Integer).unwrap();
        let hist = vec![Value::int(64)];
        let v = eval_step(&e, Mode::Integer, 7, &[&hist], None).unwrap();
        assert_eq!(v, Value::int(28));
    }

    #[test]
    fn eval_division_by_zero() {
        let e = parse_prefix(&toks("intdiv 1 0"), Mode::Integer).unwrap();
        assert_eq!(
            eval_step(&e, Mode::Integer, 0, &[&[]], None),
            Err(EvalErrorKind::DivisionByZero)
        );
    }

    #[test]
    fn floored_mod_follows_divisor_sign() {
        let e = parse_prefix(&toks("mod -9 8"), Mode::Integer).unwrap();
        assert_eq!(eval_step(&e, Mode::Integer, 0, &[&[]], None).unwrap(), Value::int(7));
        let e = parse_prefix(&toks("mod 9 -8"), Mode::Integer).unwrap();
        assert_eq!(eval_step(&e, Mode::Integer, 0, &[&[]], None).unwrap(), Value::int(-7));
        let e = parse_prefix(&toks("intdiv -9 8"), Mode::Integer).unwrap();
        assert_eq!(eval_step(&e, Mode::Integer, 0, &[&[]], None).unwrap(), Value::int(-2));
    }

    #[test]
    fn unroll_successor_relation() {
        let rel = RecurrenceRelation::parse_text("add u1 n", Mode::Integer).unwrap();
        let seqs = unroll(
            &rel,
            Mode::Integer,
            &[vec![Value::int(1)]],
            5,
            UnrollOpts::default(),
        )
        .unwrap();
        let got: Vec<i64> = seqs[0].iter().map(|v| v.to_f64() as i64).collect();
        assert_eq!(got, vec![1, 2, 4, 7, 11, 16]);
    }

    #[test]
    fn unroll_two_dimensional_system() {
        // u_{n+1} = v_n + 1, v_{n+1} = 2 u_n from (0, 0)
        let rel = RecurrenceRelation::parse_text("add v1 1 | mul u1 2", Mode::Integer).unwrap();
        let seqs = unroll(
            &rel,
            Mode::Integer,
            &[vec![Value::int(0)], vec![Value::int(0)]],
            4,
            UnrollOpts::default(),
        )
        .unwrap();
        let u: Vec<i64> = seqs[0].iter().map(|v| v.to_f64() as i64).collect();
        let v: Vec<i64> = seqs[1].iter().map(|v| v.to_f64() as i64).collect();
        assert_eq!(u, vec![0, 1, 1, 3, 3]);
        assert_eq!(v, vec![0, 0, 2, 2, 6]);
    }

    #[test]
    fn unroll_reports_failing_position() {
        // u_n = u_{n-1} // (5 - n) fails when n reaches 5
        let rel = RecurrenceRelation::parse_text("intdiv u1 sub 5 n", Mode::Integer).unwrap();
        let err = unroll(
            &rel,
            Mode::Integer,
            &[vec![Value::int(100)]],
            10,
            UnrollOpts::default(),
        )
        .unwrap_err();
        assert_eq!(err.position, 5);
        assert_eq!(err.kind, EvalErrorKind::DivisionByZero);
    }

    #[test]
    fn magnitude_guard_triggers() {
        // u_n = u_{n-1}^2 from 10 exceeds 10^100 at position 7 (10^128)
        let rel = RecurrenceRelation::parse_text("sqr u1", Mode::Integer).unwrap();
        let err = unroll(
            &rel,
            Mode::Integer,
            &[vec![Value::int(10)]],
            10,
            UnrollOpts::default(),
        )
        .unwrap_err();
        assert_eq!(err.kind, EvalErrorKind::Overflow);
        assert_eq!(err.position, 7);
    }

    #[test]
    fn float_eval_and_domain_errors() {
        let e = parse_prefix(&toks("log u1"), Mode::Float).unwrap();
        let hist = vec![Value::Float(-1.0)];
        assert_eq!(
            eval_step(&e, Mode::Float, 1, &[&hist], None),
            Err(EvalErrorKind::OutOfDomain)
        );
        let e = parse_prefix(&toks("mul pi n"), Mode::Float).unwrap();
        let v = eval_step(&e, Mode::Float, 2, &[&[]], None).unwrap();
        assert_eq!(v, Value::Float(2.0 * std::f64::consts::PI));
    }

    #[test]
    fn noise_leaf_requires_source() {
        let rel = RecurrenceRelation::parse_text("add u1 xi", Mode::Float).unwrap();
        let err = unroll(
            &rel,
            Mode::Float,
            &[vec![Value::Float(1.0)]],
            3,
            UnrollOpts::default(),
        )
        .unwrap_err();
        assert_eq!(err.kind, EvalErrorKind::MissingNoise);

        let seqs = unroll(
            &rel,
            Mode::Float,
            &[vec![Value::Float(1.0)]],
            3,
            UnrollOpts {
                first_index: 0,
                noise: NoiseSource::Mean,
            },
        )
        .unwrap();
        assert_eq!(seqs[0], vec![Value::Float(1.0); 4]);
    }

    #[test]
    fn degree_and_ops_of_leaf() {
        let e = Expr::constant(5);
        assert_eq!(e.count_ops(), 0);
        assert_eq!(e.effective_degree(), 0);
        let e = parse_prefix(&toks("add add u1 u2 xi"), Mode::Float).unwrap();
        assert_eq!(e.effective_degree(), 2);
    }

    #[test]
    fn unroll_is_deterministic() {
        let rel = RecurrenceRelation::parse_text("mod add u1 n 10", Mode::Integer).unwrap();
        let run = || {
            unroll(
                &rel,
                Mode::Integer,
                &[vec![Value::int(3)]],
                20,
                UnrollOpts::default(),
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }
}
