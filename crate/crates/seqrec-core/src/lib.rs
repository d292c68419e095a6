//! Synthesis of recurrent integer/float sequences from random symbolic
//! recurrence relations, tokenization, a small encoder-decoder transformer
//! trained to recover the relations (or extrapolate terms numerically), and
//! evaluation harnesses including an OEIS benchmark and a brute-force
//! enumeration baseline.

pub mod encoding;
pub mod evaluation;
pub mod expr;
pub mod generator;
pub mod model;
pub mod oeis;
pub mod oracle;

pub use expr::{Expr, Leaf, Mode, Op, RecurrenceRelation, Value};
