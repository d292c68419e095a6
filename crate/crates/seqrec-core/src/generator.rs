//! Random sampling of recurrence relations and their unrolled sequences:
//! uniform unary-binary tree shapes, operator/leaf labeling, initial-term
//! sampling, the resample-on-failure loop, multiplicative corruption for
//! noise-robustness experiments, and line-delimited dataset files.

use std::io::{BufRead, Write};

use num_bigint::BigInt;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{
    unroll, Constant, Expr, Leaf, Mode, NoiseSource, Op, RecurrenceRelation, UnrollOpts, Value,
    MAX_DIMS,
};
use crate::oracle::{tree_counts, TreeShape};

/// Operator-family buckets used by the difficulty ablations. Each family is
/// `{add, sub, mul}` plus the named extras, intersected with the mode's
/// operator set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpFamily {
    Base,
    Division,
    Sqrt,
    Exponential,
    Trigonometric,
}

impl OpFamily {
    pub fn extra_ops(self) -> &'static [Op] {
        match self {
            OpFamily::Base => &[],
            OpFamily::Division => &[Op::Div, Op::Inv],
            OpFamily::Sqrt => &[Op::Sqrt],
            OpFamily::Exponential => &[Op::Exp, Op::Log],
            OpFamily::Trigonometric => &[Op::Sin, Op::Cos, Op::Tan, Op::Atan],
        }
    }

    pub fn contains(self, op: Op) -> bool {
        matches!(op, Op::Add | Op::Sub | Op::Mul) || self.extra_ops().contains(&op)
    }

    /// Family pools for a mode: (unary, binary).
    pub fn pools(self, mode: Mode) -> (Vec<Op>, Vec<Op>) {
        let unary = Op::unary_set(mode)
            .iter()
            .copied()
            .filter(|&op| self.contains(op))
            .collect();
        let binary = Op::binary_set(mode)
            .iter()
            .copied()
            .filter(|&op| self.contains(op))
            .collect();
        (unary, binary)
    }
}

/// Knobs of the random generator. Defaults follow the reference
/// hyperparameters: `o <= 10`, `d <= 6`, `l in [5, 30]`, leaf kinds at
/// probability 1/3 each, initial terms uniform on `[-10, 10]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub mode: Mode,
    pub o_max: usize,
    pub d_max: usize,
    pub l_min: usize,
    pub l_max: usize,
    pub p_const: f64,
    pub p_index: f64,
    pub p_var: f64,
    /// Initial-term range (inclusive; integers use the rounded bounds).
    pub init_low: f64,
    pub init_high: f64,
    /// Probability that a leaf draw is replaced by the stochastic leaf `xi`.
    pub pi_train: f64,
    /// Number of interdependent dimensions (1..=3).
    pub dimensions: usize,
    /// Restrict operators to a family bucket.
    pub op_family: Option<OpFamily>,
    /// Sample constant leaves uniformly on `[-10, 10]` instead of the
    /// integer-and-named-constant pool (float mode only).
    pub real_prefactors: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            mode: Mode::Integer,
            o_max: 10,
            d_max: 6,
            l_min: 5,
            l_max: 30,
            p_const: 1.0 / 3.0,
            p_index: 1.0 / 3.0,
            p_var: 1.0 / 3.0,
            init_low: -10.0,
            init_high: 10.0,
            pi_train: 0.0,
            dimensions: 1,
            op_family: None,
            real_prefactors: false,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GeneratorError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("resample budget exhausted after {attempts} attempts")]
    ResampleBudget { attempts: usize },
}

/// Attempts before [`generate_sample`] gives up on a pathological config.
pub const RESAMPLE_BUDGET: usize = 64;

impl GeneratorConfig {
    pub fn float() -> Self {
        GeneratorConfig {
            mode: Mode::Float,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        let err = |m: &str| Err(GeneratorError::InvalidConfig(m.to_string()));
        if (self.p_const + self.p_index + self.p_var - 1.0).abs() > 1e-12 {
            return err("leaf probabilities must sum to 1");
        }
        if self.o_max < 1 || self.d_max < 1 || self.d_max > crate::expr::MAX_DEGREE {
            return err("operator or degree bound out of range");
        }
        if self.l_min < 1 || self.l_min > self.l_max {
            return err("need 1 <= l_min <= l_max");
        }
        if self.dimensions < 1 || self.dimensions > MAX_DIMS {
            return err("dimensions must be 1..=3");
        }
        if self.init_low >= self.init_high {
            return err("initial-term range is empty");
        }
        if self.real_prefactors && self.mode == Mode::Integer {
            return err("real prefactors require float mode");
        }
        if !(0.0..=1.0).contains(&self.pi_train) {
            return err("pi_train must be a probability");
        }
        Ok(())
    }

    fn op_pools(&self) -> (Vec<Op>, Vec<Op>) {
        match self.op_family {
            Some(fam) => fam.pools(self.mode),
            None => (
                Op::unary_set(self.mode).to_vec(),
                Op::binary_set(self.mode).to_vec(),
            ),
        }
    }
}

/// Draws a tree shape with exactly `o` internal nodes, uniformly among all
/// unary-binary shapes of that size.
pub fn sample_tree(o: usize, rng: &mut impl Rng) -> TreeShape {
    let counts = tree_counts(o);
    sample_shape(o, &counts, true, rng)
}

fn shape_counts(o: usize, allow_unary: bool) -> Vec<u128> {
    if allow_unary {
        return tree_counts(o);
    }
    // binary-only shapes: the Catalan recursion
    let mut t = vec![0u128; o + 1];
    t[0] = 1;
    for k in 1..=o {
        t[k] = (0..k).map(|i| t[i] * t[k - 1 - i]).sum();
    }
    t
}

fn sample_shape(o: usize, counts: &[u128], allow_unary: bool, rng: &mut impl Rng) -> TreeShape {
    if o == 0 {
        return TreeShape::Leaf;
    }
    let mut x = rng.gen_range(0..counts[o]);
    if allow_unary {
        if x < counts[o - 1] {
            return TreeShape::Unary(Box::new(sample_shape(o - 1, counts, allow_unary, rng)));
        }
        x -= counts[o - 1];
    }
    for i in 0..o {
        let block = counts[i] * counts[o - 1 - i];
        if x < block {
            let left = sample_shape(i, counts, allow_unary, rng);
            let right = sample_shape(o - 1 - i, counts, allow_unary, rng);
            return TreeShape::Binary(Box::new(left), Box::new(right));
        }
        x -= block;
    }
    unreachable!("tree count table is inconsistent");
}

/// Samples a random recurrence relation: one labeled tree per dimension.
pub fn sample_relation(cfg: &GeneratorConfig, rng: &mut impl Rng) -> RecurrenceRelation {
    let (unary, binary) = cfg.op_pools();
    assert!(!binary.is_empty(), "operator family has no binary operators");
    let o = rng.gen_range(1..=cfg.o_max);
    let d = rng.gen_range(1..=cfg.d_max);
    let counts = shape_counts(cfg.o_max, !unary.is_empty());
    let exprs = (0..cfg.dimensions)
        .map(|_| {
            let shape = sample_shape(o, &counts, !unary.is_empty(), rng);
            label_shape(&shape, cfg, d, &unary, &binary, rng)
        })
        .collect();
    RecurrenceRelation::new(exprs)
}

fn label_shape(
    shape: &TreeShape,
    cfg: &GeneratorConfig,
    degree_bound: usize,
    unary: &[Op],
    binary: &[Op],
    rng: &mut impl Rng,
) -> Expr {
    match shape {
        TreeShape::Leaf => Expr::Leaf(sample_leaf(cfg, degree_bound, rng)),
        TreeShape::Unary(c) => {
            assert!(!unary.is_empty(), "operator family has no unary operators");
            let op = unary[rng.gen_range(0..unary.len())];
            Expr::unary(op, label_shape(c, cfg, degree_bound, unary, binary, rng))
        }
        TreeShape::Binary(l, r) => {
            let op = binary[rng.gen_range(0..binary.len())];
            let lhs = label_shape(l, cfg, degree_bound, unary, binary, rng);
            let rhs = label_shape(r, cfg, degree_bound, unary, binary, rng);
            Expr::binary(op, lhs, rhs)
        }
    }
}

fn sample_leaf(cfg: &GeneratorConfig, degree_bound: usize, rng: &mut impl Rng) -> Leaf {
    if cfg.pi_train > 0.0 && rng.gen_bool(cfg.pi_train) {
        return Leaf::Noise;
    }
    let x: f64 = rng.gen();
    if x < cfg.p_const {
        Leaf::Const(sample_constant(cfg, rng))
    } else if x < cfg.p_const + cfg.p_index {
        Leaf::Index
    } else {
        let offset = rng.gen_range(1..=degree_bound);
        let dim = if cfg.dimensions > 1 {
            rng.gen_range(0..cfg.dimensions)
        } else {
            0
        };
        Leaf::Prior { dim, offset }
    }
}

fn sample_constant(cfg: &GeneratorConfig, rng: &mut impl Rng) -> Constant {
    match cfg.mode {
        Mode::Integer => Constant::Int(rng.gen_range(-10..=10)),
        Mode::Float if cfg.real_prefactors => Constant::Real(rng.gen_range(-10.0..10.0)),
        Mode::Float => {
            // integers -10..=10 plus the three named constants, uniformly
            match rng.gen_range(0..24) {
                21 => Constant::E,
                22 => Constant::Pi,
                23 => Constant::Gamma,
                k => Constant::Int(k as i64 - 10),
            }
        }
    }
}

fn sample_initial(cfg: &GeneratorConfig, rng: &mut impl Rng) -> Value {
    match cfg.mode {
        Mode::Integer => {
            let low = cfg.init_low.round() as i64;
            let high = cfg.init_high.round() as i64;
            Value::Int(BigInt::from(rng.gen_range(low..=high)))
        }
        Mode::Float => Value::Float(rng.gen_range(cfg.init_low..cfg.init_high)),
    }
}

/// One dataset row: a relation, its initial terms, and the unrolled sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub relation: RecurrenceRelation,
    pub mode: Mode,
    /// Per-dimension initial terms (`degree` each).
    pub initial_terms: Vec<Vec<Value>>,
    /// Per-dimension full sequences of length `degree + l`.
    pub sequences: Vec<Vec<Value>>,
    /// Sampled operator count per dimension's tree.
    pub ops: usize,
    pub degree: usize,
    pub length: usize,
    /// Seed of the per-sample RNG that produced this row (0 when unknown).
    pub seed: u64,
}

impl GeneratedSample {
    /// Sequence terms interleaved across dimensions: `[u_0, v_0, u_1, v_1, ...]`.
    pub fn interleaved_terms(&self) -> Vec<Value> {
        let len = self.sequences[0].len();
        let mut out = Vec::with_capacity(len * self.sequences.len());
        for i in 0..len {
            for seq in &self.sequences {
                out.push(seq[i].clone());
            }
        }
        out
    }

    /// Re-unrolls the stored relation and checks it reproduces the stored
    /// sequences (exact for integers, bit-exact for noise-free floats).
    pub fn replays(&self) -> bool {
        match unroll(
            &self.relation,
            self.mode,
            &self.initial_terms,
            self.length,
            UnrollOpts::default(),
        ) {
            Ok(seqs) => seqs == self.sequences,
            Err(_) => false,
        }
    }
}

/// Samples a relation, initial terms and length, unrolls, and resamples on
/// any domain error. Relations with stochastic leaves draw fresh noise here.
pub fn generate_sample(
    cfg: &GeneratorConfig,
    rng: &mut impl Rng,
) -> Result<GeneratedSample, GeneratorError> {
    cfg.validate()?;
    for _ in 0..RESAMPLE_BUDGET {
        let relation = sample_relation(cfg, rng);
        let degree = relation.degree();
        let length = rng.gen_range(cfg.l_min..=cfg.l_max);
        let initial_terms: Vec<Vec<Value>> = (0..cfg.dimensions)
            .map(|_| (0..degree).map(|_| sample_initial(cfg, rng)).collect())
            .collect();
        let ops = relation.exprs()[0].count_ops();
        let noise = if relation.uses_noise() {
            NoiseSource::Rng(rng)
        } else {
            NoiseSource::Forbid
        };
        let unrolled = unroll(
            &relation,
            cfg.mode,
            &initial_terms,
            length,
            UnrollOpts {
                first_index: 0,
                noise,
            },
        );
        if let Ok(sequences) = unrolled {
            return Ok(GeneratedSample {
                relation,
                mode: cfg.mode,
                initial_terms,
                sequences,
                ops,
                degree,
                length,
                seed: 0,
            });
        }
    }
    Err(GeneratorError::ResampleBudget {
        attempts: RESAMPLE_BUDGET,
    })
}

/// Derives the per-sample seed for `(base_seed, worker_id, index)`.
/// Workers own disjoint sample streams; the layout is stable across runs.
pub fn derive_seed(base_seed: u64, worker_id: u64, index: u64) -> u64 {
    // splitmix64 over the combined key
    let mut z = base_seed
        .wrapping_add(worker_id.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// An endless, deterministic stream of samples. Each sample gets its own
/// seeded RNG, so streams are reproducible regardless of chunking.
pub struct SampleStream {
    cfg: GeneratorConfig,
    base_seed: u64,
    worker_id: u64,
    index: u64,
}

impl SampleStream {
    pub fn new(cfg: GeneratorConfig, base_seed: u64, worker_id: u64) -> SampleStream {
        SampleStream {
            cfg,
            base_seed,
            worker_id,
            index: 0,
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Index of the next sample to be produced (for checkpointing).
    pub fn position(&self) -> u64 {
        self.index
    }

    pub fn seek(&mut self, index: u64) {
        self.index = index;
    }
}

impl Iterator for SampleStream {
    type Item = Result<GeneratedSample, GeneratorError>;

    fn next(&mut self) -> Option<Self::Item> {
        let seed = derive_seed(self.base_seed, self.worker_id, self.index);
        self.index += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Some(generate_sample(&self.cfg, &mut rng).map(|mut s| {
            s.seed = seed;
            s
        }))
    }
}

/// Multiplies every term by an independent `Normal(1, sigma)` draw.
/// `sigma = 0` is the identity. Float sequences only.
pub fn corrupt(values: &[Value], sigma: f64, rng: &mut impl RngCore) -> Vec<Value> {
    assert!(sigma >= 0.0);
    let normal = Normal::new(1.0, sigma).expect("sigma must be finite and non-negative");
    values
        .iter()
        .map(|v| match v {
            Value::Float(x) => Value::Float(x * normal.sample(rng)),
            Value::Int(_) => panic!("corrupt applies to float sequences"),
        })
        .collect()
}

/// A sample with its corrupted input-side view. Supervision targets stay
/// clean: `sample.relation` and `sample.sequences` are untouched.
#[derive(Debug, Clone)]
pub struct CorruptedSample {
    pub sample: GeneratedSample,
    pub sigma: f64,
    /// Per-dimension corrupted sequences (same shape as `sample.sequences`).
    pub noisy_sequences: Vec<Vec<Value>>,
}

const CORRUPT_SEED_TAG: u64 = 0xC0F2_0000_0000_0001;

/// Stochastic-training stream: per sample, draws `sigma ~ U(0, sigma_train)`
/// and corrupts the input sequence. `sigma_train = 0` leaves data clean.
pub struct TrainingBatchStream {
    inner: SampleStream,
    sigma_train: f64,
}

impl TrainingBatchStream {
    pub fn new(
        cfg: GeneratorConfig,
        sigma_train: f64,
        base_seed: u64,
        worker_id: u64,
    ) -> TrainingBatchStream {
        assert!(sigma_train >= 0.0);
        TrainingBatchStream {
            inner: SampleStream::new(cfg, base_seed, worker_id),
            sigma_train,
        }
    }

    pub fn position(&self) -> u64 {
        self.inner.position()
    }

    pub fn seek(&mut self, index: u64) {
        self.inner.seek(index);
    }
}

impl Iterator for TrainingBatchStream {
    type Item = Result<CorruptedSample, GeneratorError>;

    fn next(&mut self) -> Option<Self::Item> {
        let index = self.inner.position();
        let sample = match self.inner.next()? {
            Ok(s) => s,
            Err(e) => return Some(Err(e)),
        };
        let (sigma, noisy_sequences) = if self.inner.cfg.mode == Mode::Float {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                self.inner.base_seed ^ CORRUPT_SEED_TAG,
                self.inner.worker_id,
                index,
            ));
            let sigma = if self.sigma_train > 0.0 {
                rng.gen_range(0.0..self.sigma_train)
            } else {
                0.0
            };
            let noisy = sample
                .sequences
                .iter()
                .map(|seq| corrupt(seq, sigma, &mut rng))
                .collect();
            (sigma, noisy)
        } else {
            (0.0, sample.sequences.clone())
        };
        Some(Ok(CorruptedSample {
            sample,
            sigma,
            noisy_sequences,
        }))
    }
}

// ---------------------------------------------------------------------------
// dataset files: one JSON record per line
// ---------------------------------------------------------------------------

/// Serialized dataset row. Integer terms are decimal strings so arbitrary
/// precision survives the trip; float terms are JSON numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub relation: String,
    pub mode: Mode,
    pub initial: Vec<Vec<serde_json::Value>>,
    pub terms: Vec<Vec<serde_json::Value>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noisy_terms: Option<Vec<Vec<serde_json::Value>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    pub o: usize,
    pub d_eff: usize,
    pub l: usize,
    pub seed: u64,
}

fn value_to_json(v: &Value) -> serde_json::Value {
    match v {
        Value::Int(x) => serde_json::Value::String(x.to_string()),
        Value::Float(x) => serde_json::json!(x),
    }
}

fn value_from_json(v: &serde_json::Value, mode: Mode) -> Result<Value, DatasetError> {
    match (mode, v) {
        (Mode::Integer, serde_json::Value::String(s)) => s
            .parse::<BigInt>()
            .map(Value::Int)
            .map_err(|_| DatasetError::BadTerm(s.clone())),
        (Mode::Float, serde_json::Value::Number(n)) => n
            .as_f64()
            .map(Value::Float)
            .ok_or_else(|| DatasetError::BadTerm(n.to_string())),
        _ => Err(DatasetError::BadTerm(v.to_string())),
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("unparseable term `{0}`")]
    BadTerm(String),
    #[error("unparseable relation: {0}")]
    BadRelation(crate::expr::ParseError),
}

impl SampleRecord {
    pub fn from_sample(sample: &GeneratedSample) -> SampleRecord {
        SampleRecord {
            relation: sample.relation.to_text(),
            mode: sample.mode,
            initial: sample
                .initial_terms
                .iter()
                .map(|d| d.iter().map(value_to_json).collect())
                .collect(),
            terms: sample
                .sequences
                .iter()
                .map(|d| d.iter().map(value_to_json).collect())
                .collect(),
            noisy_terms: None,
            sigma: None,
            o: sample.ops,
            d_eff: sample.degree,
            l: sample.length,
            seed: sample.seed,
        }
    }

    pub fn from_corrupted(c: &CorruptedSample) -> SampleRecord {
        let mut rec = SampleRecord::from_sample(&c.sample);
        rec.sigma = Some(c.sigma);
        rec.noisy_terms = Some(
            c.noisy_sequences
                .iter()
                .map(|d| d.iter().map(value_to_json).collect())
                .collect(),
        );
        rec
    }

    pub fn to_sample(&self) -> Result<GeneratedSample, DatasetError> {
        let relation = RecurrenceRelation::parse_text(&self.relation, self.mode)
            .map_err(DatasetError::BadRelation)?;
        let conv = |rows: &Vec<Vec<serde_json::Value>>| -> Result<Vec<Vec<Value>>, DatasetError> {
            rows.iter()
                .map(|d| d.iter().map(|v| value_from_json(v, self.mode)).collect())
                .collect()
        };
        Ok(GeneratedSample {
            relation,
            mode: self.mode,
            initial_terms: conv(&self.initial)?,
            sequences: conv(&self.terms)?,
            ops: self.o,
            degree: self.d_eff,
            length: self.l,
            seed: self.seed,
        })
    }
}

pub fn write_records<'a, W: Write>(
    out: &mut W,
    records: impl Iterator<Item = &'a SampleRecord>,
) -> Result<(), DatasetError> {
    for rec in records {
        serde_json::to_writer(&mut *out, rec).map_err(|source| DatasetError::Json {
            line: 0,
            source,
        })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(input: R) -> Result<Vec<SampleRecord>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| DatasetError::Json {
            line: i + 1,
            source,
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{count_trees, enumerate_shapes};
    use std::collections::HashMap;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sample_tree_has_requested_ops() {
        let mut r = rng(1);
        for o in 1..=10 {
            for _ in 0..20 {
                assert_eq!(sample_tree(o, &mut r).internal_nodes(), o);
            }
        }
    }

    #[test]
    fn sample_tree_shapes_uniform_chi_squared() {
        // compare empirical shape frequencies against the exhaustive count
        for o in [2usize, 3] {
            let shapes = enumerate_shapes(o);
            let mut counts: HashMap<TreeShape, u64> =
                shapes.iter().cloned().map(|s| (s, 0)).collect();
            let draws = 60_000u64;
            let mut r = rng(7 + o as u64);
            for _ in 0..draws {
                *counts.get_mut(&sample_tree(o, &mut r)).unwrap() += 1;
            }
            let expected = draws as f64 / count_trees(o) as f64;
            let chi2: f64 = counts
                .values()
                .map(|&c| {
                    let d = c as f64 - expected;
                    d * d / expected
                })
                .sum();
            let dof = (count_trees(o) - 1) as f64;
            let crit = statrs::distribution::ContinuousCDF::inverse_cdf(
                &statrs::distribution::ChiSquared::new(dof).unwrap(),
                0.9999,
            );
            assert!(chi2 < crit, "o={o}: chi2={chi2:.1} >= {crit:.1}");
        }
    }

    #[test]
    fn no_noise_leaf_when_pi_zero() {
        let cfg = GeneratorConfig::default();
        let mut r = rng(2);
        for _ in 0..200 {
            assert!(!sample_relation(&cfg, &mut r).uses_noise());
        }
    }

    #[test]
    fn integer_mode_uses_integer_operators_only() {
        let cfg = GeneratorConfig::default();
        let mut r = rng(3);
        for _ in 0..200 {
            let rel = sample_relation(&cfg, &mut r);
            for e in rel.exprs() {
                e.for_each_op(&mut |op| assert!(op.in_mode(Mode::Integer), "{}", op.name()));
            }
        }
    }

    #[test]
    fn base_family_restriction() {
        let cfg = GeneratorConfig {
            op_family: Some(OpFamily::Base),
            mode: Mode::Float,
            ..Default::default()
        };
        let mut r = rng(4);
        for _ in 0..100 {
            let rel = sample_relation(&cfg, &mut r);
            for e in rel.exprs() {
                e.for_each_op(&mut |op| {
                    assert!(matches!(op, Op::Add | Op::Sub | Op::Mul), "{}", op.name())
                });
            }
        }
    }

    #[test]
    fn generated_samples_respect_bounds_and_replay() {
        let cfg = GeneratorConfig::default();
        let mut stream = SampleStream::new(cfg.clone(), 11, 0);
        for _ in 0..300 {
            let s = stream.next().unwrap().unwrap();
            assert!(s.ops >= 1 && s.ops <= cfg.o_max);
            assert!(s.degree <= cfg.d_max);
            assert!(s.length >= cfg.l_min && s.length <= cfg.l_max);
            assert_eq!(s.sequences[0].len(), s.degree + s.length);
            assert!(s.replays());
        }
    }

    #[test]
    fn float_samples_replay_too() {
        let mut stream = SampleStream::new(GeneratorConfig::float(), 13, 0);
        for _ in 0..100 {
            assert!(stream.next().unwrap().unwrap().replays());
        }
    }

    #[test]
    fn streams_are_deterministic_and_chunk_independent() {
        let cfg = GeneratorConfig::default();
        let a: Vec<_> = SampleStream::new(cfg.clone(), 42, 0)
            .take(20)
            .map(|s| s.unwrap())
            .collect();
        let mut second = SampleStream::new(cfg, 42, 0);
        second.seek(10);
        let b: Vec<_> = second.take(10).map(|s| s.unwrap()).collect();
        assert_eq!(&a[10..], &b[..]);
    }

    #[test]
    fn corrupt_sigma_zero_is_identity() {
        let values: Vec<Value> = (0..50).map(|i| Value::Float(i as f64 * 1.7 - 3.0)).collect();
        let mut r = rng(5);
        assert_eq!(corrupt(&values, 0.0, &mut r), values);
    }

    #[test]
    fn corrupt_matches_requested_sigma() {
        let n = 50_000;
        let values = vec![Value::Float(2.0); n];
        let mut r = rng(6);
        let sigma = 0.3;
        let noisy = corrupt(&values, sigma, &mut r);
        let ratios: Vec<f64> = noisy
            .iter()
            .zip(&values)
            .map(|(a, b)| a.to_f64() / b.to_f64() - 1.0)
            .collect();
        let mean: f64 = ratios.iter().sum::<f64>() / n as f64;
        let var: f64 = ratios.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        // 3-sigma band for the sample standard deviation
        let tol = 3.0 * sigma / (2.0 * n as f64).sqrt();
        assert!((std - sigma).abs() < tol, "std={std} sigma={sigma}");
        assert!(mean.abs() < 3.0 * sigma / (n as f64).sqrt() + 1e-3);
    }

    #[test]
    fn training_stream_sigma_uniform_ks() {
        let sigma_train = 0.5;
        let stream = TrainingBatchStream::new(GeneratorConfig::float(), sigma_train, 21, 0);
        let mut sigmas: Vec<f64> = stream
            .take(2000)
            .map(|c| c.unwrap().sigma / sigma_train)
            .collect();
        sigmas.sort_by(f64::total_cmp);
        let n = sigmas.len() as f64;
        let d = sigmas
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let lo = i as f64 / n;
                let hi = (i + 1) as f64 / n;
                (x - lo).abs().max((hi - x).abs())
            })
            .fold(0.0, f64::max);
        // alpha ~ 0.001 critical value
        assert!(d < 1.95 / n.sqrt(), "KS statistic {d}");
    }

    #[test]
    fn training_stream_sigma_zero_matches_clean_stream() {
        let cfg = GeneratorConfig::float();
        let clean: Vec<_> = SampleStream::new(cfg.clone(), 31, 0)
            .take(10)
            .map(|s| s.unwrap())
            .collect();
        let corrupted: Vec<_> = TrainingBatchStream::new(cfg, 0.0, 31, 0)
            .take(10)
            .map(|c| c.unwrap())
            .collect();
        for (a, b) in clean.iter().zip(&corrupted) {
            assert_eq!(a, &b.sample);
            assert_eq!(a.sequences, b.noisy_sequences);
        }
    }

    #[test]
    fn corrupted_targets_stay_clean() {
        let stream = TrainingBatchStream::new(GeneratorConfig::float(), 0.5, 33, 0);
        for c in stream.take(20).map(|c| c.unwrap()) {
            assert!(c.sample.replays());
        }
    }

    #[test]
    fn multidim_interleaving_order() {
        let cfg = GeneratorConfig {
            dimensions: 2,
            ..Default::default()
        };
        let mut stream = SampleStream::new(cfg, 51, 0);
        let s = stream.next().unwrap().unwrap();
        let flat = s.interleaved_terms();
        assert_eq!(flat[0], s.sequences[0][0]);
        assert_eq!(flat[1], s.sequences[1][0]);
        assert_eq!(flat[2], s.sequences[0][1]);
    }

    #[test]
    fn leaf_kind_frequencies() {
        let cfg = GeneratorConfig::default();
        let mut r = rng(61);
        let (mut consts, mut total) = (0u64, 0u64);
        for _ in 0..20_000 {
            let rel = sample_relation(&cfg, &mut r);
            rel.exprs()[0].for_each_leaf(&mut |l| {
                total += 1;
                if matches!(l, Leaf::Const(_)) {
                    consts += 1;
                }
            });
        }
        let p = consts as f64 / total as f64;
        let sigma = ((1.0 / 3.0) * (2.0 / 3.0) / total as f64).sqrt();
        assert!((p - 1.0 / 3.0).abs() < 3.0 * sigma, "p={p} n={total}");
    }

    #[test]
    fn record_round_trip() {
        let mut stream = SampleStream::new(GeneratorConfig::default(), 71, 0);
        let s = stream.next().unwrap().unwrap();
        let rec = SampleRecord::from_sample(&s);
        let mut buf = Vec::new();
        write_records(&mut buf, std::iter::once(&rec)).unwrap();
        let back = read_records(&buf[..]).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].to_sample().unwrap(), s);
    }

    #[test]
    fn pathological_config_exhausts_budget() {
        // division by zero at every step
        let cfg = GeneratorConfig {
            l_min: 30,
            l_max: 30,
            ..Default::default()
        };
        // force failure by demanding enormous growth: not reliably possible via
        // config alone, so check the validation errors instead
        assert!(cfg.validate().is_ok());
        let bad = GeneratorConfig {
            p_const: 0.5,
            ..Default::default()
        };
        assert!(matches!(
            bad.validate(),
            Err(GeneratorError::InvalidConfig(_))
        ));
    }
}
