//! Brute-force machinery: counting unary-binary tree shapes and expression
//! spaces, exhaustive enumeration of small expressions, and a selection-based
//! baseline that fits recurrence relations by trying every candidate.
//!
//! Everything here is independent of the neural model; the enumeration path
//! doubles as the test oracle for the random generator.

use num_bigint::BigUint;
use thiserror::Error;

use crate::expr::{
    eval_step, Constant, EvalErrorKind, Expr, Leaf, Mode, Op, RecurrenceRelation, Value,
};

/// A bare unary-binary tree shape (operators and leaves unlabeled).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TreeShape {
    Leaf,
    Unary(Box<TreeShape>),
    Binary(Box<TreeShape>, Box<TreeShape>),
}

impl TreeShape {
    pub fn internal_nodes(&self) -> usize {
        match self {
            TreeShape::Leaf => 0,
            TreeShape::Unary(c) => 1 + c.internal_nodes(),
            TreeShape::Binary(l, r) => 1 + l.internal_nodes() + r.internal_nodes(),
        }
    }
}

/// Number of unary-binary tree shapes with exactly `o` internal nodes.
///
/// `t(0) = 1` (a bare leaf); `t(o) = t(o-1) + sum_{i+j=o-1} t(i) t(j)`.
pub fn count_trees(o: usize) -> u128 {
    tree_counts(o)[o]
}

/// The table `[t(0), ..., t(o)]`.
pub fn tree_counts(o: usize) -> Vec<u128> {
    let mut t = vec![0u128; o + 1];
    t[0] = 1;
    for k in 1..=o {
        let mut total = t[k - 1];
        for i in 0..k {
            total += t[i] * t[k - 1 - i];
        }
        t[k] = total;
    }
    t
}

/// All tree shapes with exactly `o` internal nodes, in canonical order:
/// unary root first, then binary roots by ascending left-subtree size.
pub fn enumerate_shapes(o: usize) -> Vec<TreeShape> {
    if o == 0 {
        return vec![TreeShape::Leaf];
    }
    let mut out = Vec::new();
    for child in enumerate_shapes(o - 1) {
        out.push(TreeShape::Unary(Box::new(child)));
    }
    for i in 0..o {
        let lefts = enumerate_shapes(i);
        let rights = enumerate_shapes(o - 1 - i);
        for l in &lefts {
            for r in &rights {
                out.push(TreeShape::Binary(Box::new(l.clone()), Box::new(r.clone())));
            }
        }
    }
    out
}

/// A finite expression space: every tree with at most `max_ops` operators,
/// nodes drawn from the operator pools, leaves from the leaf pool.
#[derive(Debug, Clone)]
pub struct EnumerationSpace {
    pub mode: Mode,
    pub max_ops: usize,
    pub unary_ops: Vec<Op>,
    pub binary_ops: Vec<Op>,
    pub leaves: Vec<Leaf>,
}

impl EnumerationSpace {
    /// The default space for a mode: full operator sets, integer constants
    /// `-10..=10`, the index `n`, and prior terms up to `max_degree`.
    pub fn with_defaults(mode: Mode, max_ops: usize, max_degree: usize) -> EnumerationSpace {
        let mut leaves: Vec<Leaf> = ((-10)..=10).map(|v| Leaf::Const(Constant::Int(v))).collect();
        leaves.push(Leaf::Index);
        for offset in 1..=max_degree {
            leaves.push(Leaf::Prior { dim: 0, offset });
        }
        EnumerationSpace {
            mode,
            max_ops,
            unary_ops: Op::unary_set(mode).to_vec(),
            binary_ops: Op::binary_set(mode).to_vec(),
            leaves,
        }
    }

    pub fn max_degree(&self) -> usize {
        self.leaves
            .iter()
            .filter_map(|l| match l {
                Leaf::Prior { offset, .. } => Some(*offset),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }
}

/// Number of distinct expressions in the space (duplicates-by-value counted;
/// nothing is folded).
pub fn count_expressions(space: &EnumerationSpace) -> BigUint {
    let u = BigUint::from(space.unary_ops.len());
    let b = BigUint::from(space.binary_ops.len());
    let l = BigUint::from(space.leaves.len());
    let mut per_ops: Vec<BigUint> = vec![l];
    for k in 1..=space.max_ops {
        let mut total = &u * &per_ops[k - 1];
        for i in 0..k {
            total += &b * (&per_ops[i] * &per_ops[k - 1 - i]);
        }
        per_ops.push(total);
    }
    per_ops.into_iter().sum()
}

#[derive(Debug, Error)]
pub enum EnumerationError {
    #[error("space holds {size} expressions, above the {limit} guard; pass force=true")]
    TooLarge { size: BigUint, limit: u64 },
    #[error("space is empty")]
    Empty,
}

const ENUMERATION_GUARD: u64 = 10_000_000;

fn check_guard(space: &EnumerationSpace, force: bool) -> Result<(), EnumerationError> {
    let size = count_expressions(space);
    if size == BigUint::ZERO {
        return Err(EnumerationError::Empty);
    }
    if !force && size > BigUint::from(ENUMERATION_GUARD) {
        return Err(EnumerationError::TooLarge {
            size,
            limit: ENUMERATION_GUARD,
        });
    }
    Ok(())
}

/// Visits every expression in the space exactly once, in canonical order
/// (ascending operator count, then shape order, then operator and leaf pool
/// order). The visitor returns `false` to stop early.
pub fn for_each_expression(
    space: &EnumerationSpace,
    force: bool,
    visit: &mut dyn FnMut(&Expr) -> bool,
) -> Result<(), EnumerationError> {
    check_guard(space, force)?;
    // memoized levels 0..k-1 are needed to stream level k
    let mut levels: Vec<Vec<Expr>> = Vec::new();
    for k in 0..=space.max_ops {
        let mut level = Vec::new();
        let mut keep_going = true;
        emit_level(space, k, &levels, &mut |e| {
            keep_going = visit(e);
            if k < space.max_ops {
                level.push(e.clone());
            }
            keep_going
        });
        if !keep_going {
            return Ok(());
        }
        levels.push(level);
    }
    Ok(())
}

fn emit_level(
    space: &EnumerationSpace,
    k: usize,
    lower: &[Vec<Expr>],
    visit: &mut impl FnMut(&Expr) -> bool,
) {
    if k == 0 {
        for leaf in &space.leaves {
            if !visit(&Expr::Leaf(*leaf)) {
                return;
            }
        }
        return;
    }
    for op in &space.unary_ops {
        for child in &lower[k - 1] {
            if !visit(&Expr::Unary(*op, Box::new(child.clone()))) {
                return;
            }
        }
    }
    for op in &space.binary_ops {
        for i in 0..k {
            for l in &lower[i] {
                for r in &lower[k - 1 - i] {
                    if !visit(&Expr::Binary(
                        *op,
                        Box::new(l.clone()),
                        Box::new(r.clone()),
                    )) {
                        return;
                    }
                }
            }
        }
    }
}

/// Materializes the whole space. Refuses spaces above the guard unless forced.
pub fn enumerate_expressions(
    space: &EnumerationSpace,
    force: bool,
) -> Result<Vec<Expr>, EnumerationError> {
    let mut out = Vec::new();
    for_each_expression(space, force, &mut |e| {
        out.push(e.clone());
        true
    })?;
    Ok(out)
}

/// A candidate found by [`fit_by_enumeration`].
#[derive(Debug, Clone)]
pub struct FitCandidate {
    pub relation: RecurrenceRelation,
    pub ops: usize,
    /// Max relative error over the reconstructed observed terms.
    pub max_error: f64,
}

/// Tries every expression in the space as a recurrence relation for the
/// observed 1-D sequence: candidates are unrolled from the observed prefix and
/// kept when they reproduce all remaining observed terms within `tau`
/// (relative error; absolute when the observed term is zero).
///
/// The result is sorted by Occam ranking: operator count first, then max
/// error. Candidate degree is capped at `observed.len() - 1` so at least one
/// step is verified.
pub fn fit_by_enumeration(
    observed: &[Value],
    space: &EnumerationSpace,
    tau: f64,
    force: bool,
) -> Result<Vec<FitCandidate>, EnumerationError> {
    assert!(!observed.is_empty());
    let max_degree = space.max_degree().min(observed.len() - 1);
    let mut matches = Vec::new();
    for_each_expression(space, force, &mut |expr| {
        let degree = expr.effective_degree();
        if degree <= max_degree && expr.max_dim().unwrap_or(0) == 0 {
            if let Some(err) = reconstruction_error(expr, space.mode, observed, degree, tau) {
                matches.push(FitCandidate {
                    relation: RecurrenceRelation::single(expr.clone()),
                    ops: expr.count_ops(),
                    max_error: err,
                });
            }
        }
        true
    })?;
    matches.sort_by(|a, b| {
        a.ops
            .cmp(&b.ops)
            .then(a.max_error.total_cmp(&b.max_error))
    });
    Ok(matches)
}

/// Max relative error of the candidate's own trajectory against the observed
/// terms, or `None` if any term misses the tolerance or fails to evaluate.
fn reconstruction_error(
    expr: &Expr,
    mode: Mode,
    observed: &[Value],
    degree: usize,
    tau: f64,
) -> Option<f64> {
    let mut traj: Vec<Value> = observed[..degree].to_vec();
    let mut worst = 0.0f64;
    for (position, target) in observed.iter().enumerate().skip(degree) {
        let v = eval_step(expr, mode, position as i64, &[&traj], None).ok()?;
        let err = term_error(&v, target)?;
        if err > tau {
            return None;
        }
        worst = worst.max(err);
        traj.push(v);
    }
    Some(worst)
}

/// Relative error `|pred - truth| / |truth|`, absolute when `truth` is zero,
/// and exactly 0.0 for exact matches.
pub fn term_error(pred: &Value, truth: &Value) -> Option<f64> {
    if pred == truth {
        return Some(0.0);
    }
    let (p, t) = (pred.to_f64(), truth.to_f64());
    if !p.is_finite() || !t.is_finite() {
        // exact comparison already failed; fall back on big-int arithmetic
        if let (Value::Int(a), Value::Int(b)) = (pred, truth) {
            let diff = (a - b).magnitude().to_string().len() as f64;
            let mag = b.magnitude().to_string().len() as f64;
            // crude decimal-digit comparison is enough: both exceed f64 range
            return Some(10f64.powf(diff - mag));
        }
        return None;
    }
    if t == 0.0 {
        Some(p.abs())
    } else {
        Some((p - t).abs() / t.abs())
    }
}

/// Extrapolates `n_pred` further terms of a fitted 1-D relation, priming the
/// history with the observed terms.
pub fn extrapolate(
    rel: &RecurrenceRelation,
    mode: Mode,
    observed: &[Value],
    n_pred: usize,
) -> Result<Vec<Value>, EvalErrorKind> {
    let mut traj = observed.to_vec();
    let mut out = Vec::with_capacity(n_pred);
    for step in 0..n_pred {
        let n = (observed.len() + step) as i64;
        let v = eval_step(&rel.exprs()[0], mode, n, &[&traj], None)?;
        traj.push(v.clone());
        out.push(v);
    }
    Ok(out)
}
