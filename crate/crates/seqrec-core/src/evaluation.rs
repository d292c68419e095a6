//! Evaluation: the tolerance-based accuracy metric, hypothesis re-ranking
//! by input reconstruction, difficulty-bucketed reports, noise and
//! distribution-shift protocols, constant/function approximation harnesses,
//! and iterative refinement.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::Vocabulary;
use crate::expr::{eval_step, Expr, Leaf, Mode, Op, RecurrenceRelation, Value};
use crate::generator::{corrupt, derive_seed, GeneratedSample, GeneratorConfig, SampleStream};
use crate::model::nn::{Model, Scalar, Task};
use crate::model::{beam_decode, greedy_decode, Hypothesis};
use crate::oracle::term_error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub tau: f64,
    pub n_pred: usize,
    /// Input prefix length used by set builders (OEIS, approximation).
    pub n_input: usize,
    pub beam_size: usize,
    pub max_decode_len: usize,
    /// Numeric-task target rounding precision (relative), per the token
    /// encoding's 4-significant-digit plateau.
    pub numeric_epsilon: Option<f64>,
    pub tau_sweep: Vec<f64>,
    pub n_pred_sweep: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tau: 1e-10,
            n_pred: 10,
            n_input: 25,
            beam_size: 10,
            max_decode_len: 64,
            numeric_epsilon: None,
            tau_sweep: vec![0.0, 1e-10, 1e-5, 1e-2, 1e-1],
            n_pred_sweep: vec![1, 5, 10],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.tau < 0.0 || self.n_pred == 0 {
            return Err(EvalError::BadConfig);
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation config")]
    BadConfig,
    #[error("empty evaluation set")]
    EmptySet,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("oracle function not finite at n = {0}")]
    OracleDomain(i64),
    #[error("no valid candidate")]
    NoCandidate,
}

/// Anything that maps an encoded input sequence to ranked hypotheses.
pub trait Predictor {
    fn predict(&self, src: &[u32]) -> Vec<Hypothesis>;
}

/// Beam (or greedy) decoding of a trained model.
pub struct ModelPredictor<'a, S> {
    pub model: &'a Model<S>,
    pub bos: u32,
    pub eos: u32,
    pub beam_size: usize,
    pub max_len: usize,
}

impl<S: Scalar> Predictor for ModelPredictor<'_, S> {
    fn predict(&self, src: &[u32]) -> Vec<Hypothesis> {
        let result = if self.beam_size == 1 {
            greedy_decode(self.model, src, self.max_len, self.bos, self.eos).map(|h| vec![h])
        } else {
            beam_decode(
                self.model,
                src,
                self.beam_size,
                self.max_len,
                self.bos,
                self.eos,
            )
        };
        result.unwrap_or_default()
    }
}

// ---------------------------------------------------------------------------
// accuracy
// ---------------------------------------------------------------------------

/// Rounds to `digits` significant decimal digits (ties to even).
pub fn round_significant(x: f64, digits: u32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", digits as usize - 1, x).parse().unwrap()
}

fn epsilon_digits(eps: f64) -> u32 {
    (1.0 - eps.log10()).round().max(1.0) as u32
}

/// Per-term prediction errors: relative against the true term, absolute when
/// the true term is zero. `None` marks an unusable prediction (mode
/// mismatch, missing term).
pub fn term_errors(
    predicted: &[Value],
    truth: &[Value],
    numeric_epsilon: Option<f64>,
) -> Vec<Option<f64>> {
    (0..truth.len())
        .map(|i| {
            let p = predicted.get(i)?;
            match (numeric_epsilon, &truth[i]) {
                (Some(eps), Value::Float(t)) => {
                    let rounded = Value::Float(round_significant(*t, epsilon_digits(eps)));
                    term_error(p, &rounded)
                }
                _ => term_error(p, &truth[i]),
            }
        })
        .collect()
}

/// The tolerance metric: 1 iff every predicted term is within relative
/// error `tau` of the truth (inclusive).
pub fn accuracy_one(
    predicted: &[Value],
    truth: &[Value],
    tau: f64,
    numeric_epsilon: Option<f64>,
) -> bool {
    if predicted.len() < truth.len() {
        return false;
    }
    term_errors(predicted, truth, numeric_epsilon)
        .iter()
        .all(|e| matches!(e, Some(err) if *err <= tau))
}

// ---------------------------------------------------------------------------
// hypothesis re-ranking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub relation_text: String,
    #[serde(skip)]
    pub relation: Option<RecurrenceRelation>,
    /// Max relative error re-unrolling the observed input.
    pub reconstruction_error: f64,
    pub norm_log_likelihood: f64,
    pub token_len: usize,
}

/// Decodes each hypothesis and scores it by how well it reproduces the
/// observed terms when unrolled from the first `degree` of them. Invalid or
/// non-reproducible hypotheses are dropped and counted.
pub fn rank_hypotheses(
    hyps: &[Hypothesis],
    observed: &[Vec<Value>],
    mode: Mode,
    vocab: &Vocabulary,
) -> (Vec<RankedCandidate>, usize) {
    let mut invalid = 0usize;
    let mut out = Vec::new();
    for hyp in hyps {
        let Ok(rel) = vocab.decode_relation(&hyp.tokens, mode) else {
            invalid += 1;
            continue;
        };
        if rel.dimension() != observed.len() {
            invalid += 1;
            continue;
        }
        let d = rel.degree();
        let n_obs = observed[0].len();
        if d >= n_obs {
            invalid += 1;
            continue;
        }
        let initial: Vec<Vec<Value>> = observed.iter().map(|seq| seq[..d].to_vec()).collect();
        let Some(replayed) = replay(&rel, mode, &initial, n_obs - d) else {
            invalid += 1;
            continue;
        };
        let mut worst: f64 = 0.0;
        let mut usable = true;
        for (dim, seq) in observed.iter().enumerate() {
            for (i, truth) in seq.iter().enumerate() {
                match term_error(&replayed[dim][i], truth) {
                    Some(e) => worst = worst.max(e),
                    None => usable = false,
                }
            }
        }
        if !usable || !worst.is_finite() {
            invalid += 1;
            continue;
        }
        out.push(RankedCandidate {
            relation_text: rel.to_text(),
            relation: Some(rel),
            reconstruction_error: worst,
            norm_log_likelihood: hyp.norm_log_likelihood,
            token_len: hyp.tokens.len(),
        });
    }
    out.sort_by(|a, b| {
        a.reconstruction_error
            .total_cmp(&b.reconstruction_error)
            .then(b.norm_log_likelihood.total_cmp(&a.norm_log_likelihood))
            .then(a.token_len.cmp(&b.token_len))
    });
    (out, invalid)
}

fn replay(
    rel: &RecurrenceRelation,
    mode: Mode,
    initial: &[Vec<Value>],
    steps: usize,
) -> Option<Vec<Vec<Value>>> {
    let mut history: Vec<Vec<Value>> = initial.to_vec();
    for _ in 0..steps {
        let n = history[0].len() as i64;
        let views: Vec<&[Value]> = history.iter().map(|h| h.as_slice()).collect();
        let mut next = Vec::with_capacity(rel.dimension());
        for expr in rel.exprs() {
            next.push(eval_step(expr, mode, n, &views, Some(0.0)).ok()?);
        }
        for (h, v) in history.iter_mut().zip(next) {
            h.push(v);
        }
    }
    Some(history)
}

/// Continues a relation past the observed terms: the whole observation is
/// the history, indices continue from its length.
pub fn extrapolate_terms(
    rel: &RecurrenceRelation,
    mode: Mode,
    observed: &[Vec<Value>],
    n_pred: usize,
) -> Option<Vec<Vec<Value>>> {
    if rel.dimension() != observed.len() || rel.degree() > observed[0].len() {
        return None;
    }
    let full = replay(rel, mode, observed, n_pred)?;
    let skip = observed[0].len();
    Some(full.into_iter().map(|seq| seq[skip..].to_vec()).collect())
}

// ---------------------------------------------------------------------------
// evaluation sets and reports
// ---------------------------------------------------------------------------

/// One evaluation item: observed input terms and held-out continuations.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub sample: GeneratedSample,
    /// Per-dimension observed prefix.
    pub input: Vec<Vec<Value>>,
    /// Per-dimension next `n_pred` terms.
    pub truth: Vec<Vec<Value>>,
}

impl EvalItem {
    pub fn interleaved_input(terms: &[Vec<Value>]) -> Vec<Value> {
        let len = terms[0].len();
        let mut out = Vec::with_capacity(len * terms.len());
        for i in 0..len {
            for seq in terms {
                out.push(seq[i].clone());
            }
        }
        out
    }
}

/// Splits freshly generated samples into (input, truth) pairs.
pub fn make_eval_set(
    gen_cfg: &GeneratorConfig,
    n_items: usize,
    n_pred: usize,
    base_seed: u64,
) -> Vec<EvalItem> {
    let mut out = Vec::with_capacity(n_items);
    let stream = SampleStream::new(gen_cfg.clone(), base_seed, 0);
    for sample in stream.flatten() {
        let total = sample.sequences[0].len();
        if total <= sample.degree + n_pred {
            continue;
        }
        let cut = total - n_pred;
        let input: Vec<Vec<Value>> = sample.sequences.iter().map(|s| s[..cut].to_vec()).collect();
        let truth: Vec<Vec<Value>> = sample.sequences.iter().map(|s| s[cut..].to_vec()).collect();
        out.push(EvalItem {
            sample,
            input,
            truth,
        });
        if out.len() == n_items {
            break;
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub count: usize,
    pub hits: usize,
}

impl Bucket {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.hits as f64 / self.count as f64
        }
    }

    fn add(&mut self, hit: bool) {
        self.count += 1;
        self.hits += hit as usize;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub hits: usize,
    pub accuracy: f64,
    pub invalid_predictions: usize,
    pub invalid_rate: f64,
    pub by_ops: BTreeMap<usize, Bucket>,
    pub by_degree: BTreeMap<usize, Bucket>,
    pub by_length: BTreeMap<usize, Bucket>,
    pub by_family: BTreeMap<String, Bucket>,
    pub tau_sweep: Vec<(f64, f64)>,
    pub n_pred_sweep: Vec<(usize, f64)>,
    pub config: EvalConfig,
    /// Protocol annotation (noise level, initial-term range, ...).
    pub tag: Option<String>,
}

/// Per-item log record, one JSON line each.
#[derive(Debug, Serialize, Deserialize)]
pub struct ItemRecord {
    pub index: usize,
    pub input: Vec<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noisy_input: Option<Vec<Vec<String>>>,
    pub truth_relation: String,
    pub candidates: Vec<RankedCandidate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chosen: Option<String>,
    /// Worst per-step error across dimensions, one entry per predicted step.
    pub term_errors: Vec<f64>,
    pub ok: bool,
    pub invalid: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub o: usize,
    pub d: usize,
    pub l: usize,
    pub family: String,
}

/// Smallest operator-family bucket covering the relation's operators.
pub fn family_tag(rel: &RecurrenceRelation) -> String {
    let mut ops = Vec::new();
    for e in rel.exprs() {
        e.for_each_op(&mut |op| ops.push(op));
    }
    let has = |set: &[Op]| ops.iter().any(|op| set.contains(op));
    let base_only = ops
        .iter()
        .all(|op| matches!(op, Op::Add | Op::Sub | Op::Mul));
    if base_only {
        return "base".into();
    }
    let div = has(&[Op::Div, Op::Inv, Op::IntDiv, Op::Mod]);
    let sqrt = has(&[Op::Sqrt]);
    let exp = has(&[Op::Exp, Op::Log]);
    let trig = has(&[Op::Sin, Op::Cos, Op::Tan, Op::Atan]);
    match (div, sqrt, exp, trig) {
        (true, false, false, false) => "division".into(),
        (false, true, false, false) => "sqrt".into(),
        (false, false, true, false) => "exponential".into(),
        (false, false, false, true) => "trigonometric".into(),
        _ => "mixed".into(),
    }
}

fn values_to_strings(seqs: &[Vec<Value>]) -> Vec<Vec<String>> {
    seqs.iter()
        .map(|s| s.iter().map(|v| v.to_string()).collect())
        .collect()
}

/// Runs the protocol over an item set. `noisy_inputs`, when given, replaces
/// the model-visible input (scoring still uses the clean truth).
pub fn evaluate_with_inputs(
    predictor: &dyn Predictor,
    items: &[EvalItem],
    noisy_inputs: Option<&[Vec<Vec<Value>>]>,
    cfg: &EvalConfig,
    vocab: &Vocabulary,
    task: Task,
    tag: Option<String>,
    mut log: Option<&mut dyn Write>,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let mode = items[0].sample.mode;
    let mut report = EvalReport {
        total: items.len(),
        hits: 0,
        accuracy: 0.0,
        invalid_predictions: 0,
        invalid_rate: 0.0,
        by_ops: BTreeMap::new(),
        by_degree: BTreeMap::new(),
        by_length: BTreeMap::new(),
        by_family: BTreeMap::new(),
        tau_sweep: Vec::new(),
        n_pred_sweep: Vec::new(),
        config: cfg.clone(),
        tag,
    };
    let mut sweep_tau_hits = vec![0usize; cfg.tau_sweep.len()];
    let mut sweep_np_hits = vec![0usize; cfg.n_pred_sweep.len()];
    let mut total_predictions = 0usize;

    for (index, item) in items.iter().enumerate() {
        let visible: &[Vec<Value>] = noisy_inputs.map_or(&item.input, |n| &n[index]);
        let mut record = ItemRecord {
            index,
            input: values_to_strings(&item.input),
            noisy_input: noisy_inputs.map(|n| values_to_strings(&n[index])),
            truth_relation: item.sample.relation.to_text(),
            candidates: Vec::new(),
            chosen: None,
            term_errors: Vec::new(),
            ok: false,
            invalid: 0,
            reason: None,
            o: item.sample.ops,
            d: item.sample.degree,
            l: item.sample.length,
            family: family_tag(&item.sample.relation),
        };

        let flat = EvalItem::interleaved_input(visible);
        let errors: Vec<Option<f64>> = match vocab.encode_terms(&flat) {
            Err(e) => {
                record.reason = Some(format!("input encoding failed: {e}"));
                vec![None; cfg.n_pred]
            }
            Ok(src) => {
                let hyps = predictor.predict(&src.ids);
                total_predictions += 1;
                match task {
                    Task::Symbolic => {
                        // invalid rate counts items whose top-likelihood
                        // output is not a well-formed relation
                        let top_invalid = hyps
                            .first()
                            .is_none_or(|h| vocab.decode_relation(&h.tokens, mode).is_err());
                        report.invalid_predictions += top_invalid as usize;
                        let (ranked, invalid) = rank_hypotheses(&hyps, visible, mode, vocab);
                        record.invalid = invalid;
                        match ranked.first().and_then(|c| c.relation.clone()) {
                            Some(rel) => {
                                record.chosen = Some(rel.to_text());
                                record.candidates = ranked;
                                match extrapolate_terms(&rel, mode, &item.input, cfg.n_pred) {
                                    Some(pred) => per_step_errors(&pred, &item.truth, None),
                                    None => {
                                        record.reason = Some("extrapolation failed".into());
                                        vec![None; cfg.n_pred]
                                    }
                                }
                            }
                            None => {
                                record.reason = Some("no valid hypothesis".into());
                                vec![None; cfg.n_pred]
                            }
                        }
                    }
                    Task::Numeric => match hyps
                        .first()
                        .and_then(|h| vocab.decode_terms(&h.tokens, mode).ok())
                    {
                        Some(decoded) => {
                            let dims = item.truth.len();
                            let pred = deinterleave(&decoded, dims);
                            per_step_errors(&pred, &item.truth, cfg.numeric_epsilon)
                        }
                        None => {
                            report.invalid_predictions += 1;
                            record.invalid = 1;
                            record.reason = Some("undecodable numeric output".into());
                            vec![None; cfg.n_pred]
                        }
                    },
                }
            }
        };

        record.term_errors = errors
            .iter()
            .map(|e| e.unwrap_or(f64::INFINITY))
            .collect();
        let hit_at = |tau: f64, k: usize| -> bool {
            errors.len() >= k
                && errors[..k]
                    .iter()
                    .all(|e| matches!(e, Some(err) if *err <= tau))
        };
        let hit = hit_at(cfg.tau, cfg.n_pred);
        record.ok = hit;
        report.hits += hit as usize;
        for (i, &tau) in cfg.tau_sweep.iter().enumerate() {
            sweep_tau_hits[i] += hit_at(tau, cfg.n_pred) as usize;
        }
        for (i, &np) in cfg.n_pred_sweep.iter().enumerate() {
            if np <= errors.len() {
                sweep_np_hits[i] += hit_at(cfg.tau, np) as usize;
            }
        }
        report.by_ops.entry(record.o).or_default().add(hit);
        report.by_degree.entry(record.d).or_default().add(hit);
        report.by_length.entry(record.l).or_default().add(hit);
        report
            .by_family
            .entry(record.family.clone())
            .or_default()
            .add(hit);
        if let Some(out) = log.as_deref_mut() {
            serde_json::to_writer(&mut *out, &record).map_err(std::io::Error::other)?;
            out.write_all(b"\n")?;
        }
    }

    report.accuracy = report.hits as f64 / report.total as f64;
    report.invalid_rate = report.invalid_predictions as f64 / total_predictions.max(1) as f64;
    report.tau_sweep = cfg
        .tau_sweep
        .iter()
        .zip(&sweep_tau_hits)
        .map(|(&t, &h)| (t, h as f64 / report.total as f64))
        .collect();
    report.n_pred_sweep = cfg
        .n_pred_sweep
        .iter()
        .zip(&sweep_np_hits)
        .map(|(&k, &h)| (k, h as f64 / report.total as f64))
        .collect();
    Ok(report)
}

fn deinterleave(flat: &[Value], dims: usize) -> Vec<Vec<Value>> {
    let mut out = vec![Vec::new(); dims];
    for (i, v) in flat.iter().enumerate() {
        out[i % dims].push(v.clone());
    }
    out
}

/// Worst error across dimensions at each predicted step.
fn per_step_errors(
    pred: &[Vec<Value>],
    truth: &[Vec<Value>],
    numeric_epsilon: Option<f64>,
) -> Vec<Option<f64>> {
    let steps = truth[0].len();
    (0..steps)
        .map(|i| {
            let mut worst: f64 = 0.0;
            for (p_dim, t_dim) in pred.iter().zip(truth) {
                let p = p_dim.get(i)?;
                let t = t_dim.get(i)?;
                let e = match (numeric_epsilon, t) {
                    (Some(eps), Value::Float(x)) => {
                        term_error(p, &Value::Float(round_significant(*x, epsilon_digits(eps))))?
                    }
                    _ => term_error(p, t)?,
                };
                worst = worst.max(e);
            }
            Some(worst)
        })
        .collect()
}

pub fn evaluate(
    predictor: &dyn Predictor,
    items: &[EvalItem],
    cfg: &EvalConfig,
    vocab: &Vocabulary,
    task: Task,
    log: Option<&mut dyn Write>,
) -> Result<EvalReport, EvalError> {
    evaluate_with_inputs(predictor, items, None, cfg, vocab, task, None, log)
}

/// Corrupts every input term with multiplicative `Normal(1, sigma_test)`
/// noise and evaluates against the clean continuation. `sigma_test = 0`
/// reproduces `evaluate` bit for bit.
pub fn noise_protocol(
    predictor: &dyn Predictor,
    items: &[EvalItem],
    sigma_test: f64,
    noise_seed: u64,
    cfg: &EvalConfig,
    vocab: &Vocabulary,
    task: Task,
    log: Option<&mut dyn Write>,
) -> Result<EvalReport, EvalError> {
    let noisy: Vec<Vec<Vec<Value>>> = items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(noise_seed, 0, i as u64));
            item.input
                .iter()
                .map(|seq| corrupt(seq, sigma_test, &mut rng))
                .collect()
        })
        .collect();
    evaluate_with_inputs(
        predictor,
        items,
        Some(&noisy),
        cfg,
        vocab,
        task,
        Some(format!("sigma_test={sigma_test}")),
        log,
    )
}

/// Evaluates on items whose initial terms come from an overridden range
/// (the distribution-shift protocol, default tolerance 0.01).
pub fn shift_protocol(
    predictor: &dyn Predictor,
    gen_cfg: &GeneratorConfig,
    init_range: (f64, f64),
    n_items: usize,
    base_seed: u64,
    cfg: &EvalConfig,
    vocab: &Vocabulary,
    task: Task,
    log: Option<&mut dyn Write>,
) -> Result<EvalReport, EvalError> {
    let shifted = GeneratorConfig {
        init_low: init_range.0,
        init_high: init_range.1,
        ..gen_cfg.clone()
    };
    let items = make_eval_set(&shifted, n_items, cfg.n_pred, base_seed);
    evaluate_with_inputs(
        predictor,
        &items,
        None,
        cfg,
        vocab,
        task,
        Some(format!("init_range=[{},{}]", init_range.0, init_range.1)),
        log,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseGridReport {
    pub sigma_train: Vec<f64>,
    pub sigma_test: Vec<f64>,
    /// accuracy[i][j] for sigma_train[i] x sigma_test[j].
    pub accuracy: Vec<Vec<f64>>,
    pub tau: f64,
    pub n_pred: usize,
}

/// Noise-robustness grid: one predictor per training noise level, each
/// evaluated at every test corruption level.
pub fn noise_grid(
    rows: &[(f64, &dyn Predictor)],
    sigma_test: &[f64],
    items: &[EvalItem],
    noise_seed: u64,
    cfg: &EvalConfig,
    vocab: &Vocabulary,
    task: Task,
) -> Result<NoiseGridReport, EvalError> {
    let mut accuracy = Vec::with_capacity(rows.len());
    for (_, predictor) in rows {
        let mut row = Vec::with_capacity(sigma_test.len());
        for &sigma in sigma_test {
            let report = noise_protocol(
                *predictor, items, sigma, noise_seed, cfg, vocab, task, None,
            )?;
            row.push(report.accuracy);
        }
        accuracy.push(row);
    }
    Ok(NoiseGridReport {
        sigma_train: rows.iter().map(|(s, _)| *s).collect(),
        sigma_test: sigma_test.to_vec(),
        accuracy,
        tau: cfg.tau,
        n_pred: cfg.n_pred,
    })
}

// ---------------------------------------------------------------------------
// approximation workflows
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstantCandidate {
    pub relation_text: String,
    /// Extracted slope when the candidate is linear in n.
    pub value: Option<f64>,
    pub relative_error: f64,
}

/// Feeds the model `u_n = C n` for n = 0..n_input-1 and ranks candidate
/// expressions by how well they approximate C.
pub fn approximate_constant(
    predictor: &dyn Predictor,
    c: f64,
    cfg: &EvalConfig,
    vocab: &Vocabulary,
) -> Result<Vec<ConstantCandidate>, EvalError> {
    let n_input = cfg.n_input.max(2);
    let terms: Vec<Value> = (0..n_input).map(|n| Value::Float(c * n as f64)).collect();
    let src = vocab
        .encode_terms(&terms)
        .map_err(|_| EvalError::NoCandidate)?;
    let hyps = predictor.predict(&src.ids);
    let observed = vec![terms.clone()];
    let (ranked, _) = rank_hypotheses(&hyps, &observed, Mode::Float, vocab);
    let last = n_input - 1;
    let mut out: Vec<ConstantCandidate> = ranked
        .into_iter()
        .filter_map(|cand| {
            let rel = cand.relation?;
            let d = rel.degree();
            let initial = vec![terms[..d.max(1)].to_vec()];
            let replayed = replay(&rel, Mode::Float, &initial, n_input - d.max(1))?;
            let slope = replayed[0][last].to_f64() / last as f64;
            let linear = replayed[0]
                .iter()
                .enumerate()
                .all(|(n, v)| (v.to_f64() - slope * n as f64).abs() <= 1e-9 * slope.abs().max(1.0));
            let (value, err) = if linear && slope.is_finite() {
                (Some(slope), ((slope - c) / c).abs())
            } else {
                let worst = replayed[0]
                    .iter()
                    .enumerate()
                    .map(|(n, v)| {
                        let t = c * n as f64;
                        if t == 0.0 {
                            v.to_f64().abs()
                        } else {
                            ((v.to_f64() - t) / t).abs()
                        }
                    })
                    .fold(0.0f64, f64::max);
                (None, worst)
            };
            Some(ConstantCandidate {
                relation_text: cand.relation_text,
                value,
                relative_error: err,
            })
        })
        .collect();
    out.sort_by(|a, b| a.relative_error.total_cmp(&b.relative_error));
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionCandidate {
    pub relation_text: String,
    /// Max relative error extrapolating past the sampled points.
    pub extrapolation_error: f64,
}

/// Samples `u_n = f(n)` for n = 1..=n_input and ranks symbolic candidates
/// by extrapolation error on the next `n_pred` points.
pub fn approximate_function(
    predictor: &dyn Predictor,
    f: &dyn Fn(f64) -> f64,
    cfg: &EvalConfig,
    vocab: &Vocabulary,
) -> Result<Vec<FunctionCandidate>, EvalError> {
    let n_input = cfg.n_input;
    let sample = |n: i64| -> Result<Value, EvalError> {
        let v = f(n as f64);
        if v.is_finite() {
            Ok(Value::Float(v))
        } else {
            Err(EvalError::OracleDomain(n))
        }
    };
    // index 0 is unused by the 1-based sampling; keep the natural alignment
    // by shifting everything down one
    let terms: Vec<Value> = (1..=n_input as i64)
        .map(sample)
        .collect::<Result<_, _>>()?;
    let src = vocab
        .encode_terms(&terms)
        .map_err(|_| EvalError::NoCandidate)?;
    let hyps = predictor.predict(&src.ids);
    let mut out: Vec<FunctionCandidate> = hyps
        .iter()
        .filter_map(|hyp| {
            let rel = vocab.decode_relation(&hyp.tokens, Mode::Float).ok()?;
            if rel.dimension() != 1 {
                return None;
            }
            let pred = extrapolate_shifted(&rel, &terms, cfg.n_pred)?;
            let mut worst: f64 = 0.0;
            for (k, v) in pred.iter().enumerate() {
                let n = (n_input + k + 1) as i64;
                let t = f(n as f64);
                if !t.is_finite() {
                    return None;
                }
                let e = if t == 0.0 {
                    v.to_f64().abs()
                } else {
                    ((v.to_f64() - t) / t).abs()
                };
                worst = worst.max(e);
            }
            Some(FunctionCandidate {
                relation_text: rel.to_text(),
                extrapolation_error: worst,
            })
        })
        .collect();
    out.sort_by(|a, b| a.extrapolation_error.total_cmp(&b.extrapolation_error));
    Ok(out)
}

/// Extrapolation for 1-based sampled functions: observed[k] is f(k+1), so
/// the next index is one past the history length.
fn extrapolate_shifted(
    rel: &RecurrenceRelation,
    observed: &[Value],
    n_pred: usize,
) -> Option<Vec<Value>> {
    if rel.degree() > observed.len() {
        return None;
    }
    let mut history = observed.to_vec();
    for _ in 0..n_pred {
        let n = history.len() as i64 + 1;
        let views = [history.as_slice()];
        let v = eval_step(&rel.exprs()[0], Mode::Float, n, &views, Some(0.0)).ok()?;
        history.push(v);
    }
    Some(history[observed.len()..].to_vec())
}

// ---------------------------------------------------------------------------
// iterative refinement
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementRound {
    pub expression: String,
    /// Max absolute residual before this round's correction.
    pub residual_before: f64,
    pub residual_after: f64,
}

#[derive(Debug, Clone)]
pub struct RefinementResult {
    /// Sum of the per-round expressions (a closed form in n).
    pub expression: Expr,
    pub rounds: Vec<RefinementRound>,
}

fn closed_form_in_n(e: &Expr) -> bool {
    let mut ok = true;
    e.for_each_leaf(&mut |l| {
        if matches!(l, Leaf::Prior { .. } | Leaf::Noise) {
            ok = false;
        }
    });
    ok
}

fn eval_closed(e: &Expr, n: i64) -> Option<f64> {
    let empty: [&[Value]; 1] = [&[]];
    match eval_step(e, Mode::Float, n, &empty, Some(0.0)) {
        Ok(v) => Some(v.to_f64()),
        Err(_) => None,
    }
}

/// Fits `values[k] = f(ns[k])` by repeatedly predicting the residual and
/// accumulating the predicted closed forms. Stops early when a round yields
/// no usable candidate or the residual vanishes.
pub fn iterative_refinement(
    predictor: &dyn Predictor,
    ns: &[i64],
    values: &[f64],
    depth: usize,
    vocab: &Vocabulary,
) -> Result<RefinementResult, EvalError> {
    assert_eq!(ns.len(), values.len());
    assert!(depth >= 1);
    let mut residual: Vec<f64> = values.to_vec();
    let mut acc: Option<Expr> = None;
    let mut rounds = Vec::new();
    let scale = values.iter().map(|v| v.abs()).fold(1.0f64, f64::max);
    for _ in 0..depth {
        let before = residual.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        if before <= 1e-12 * scale {
            break;
        }
        let terms: Vec<Value> = residual.iter().map(|&v| Value::Float(v)).collect();
        let Ok(src) = vocab.encode_terms(&terms) else {
            break;
        };
        let hyps = predictor.predict(&src.ids);
        // best closed-form candidate by residual reconstruction error
        let mut best: Option<(f64, Expr)> = None;
        for hyp in &hyps {
            let Ok(rel) = vocab.decode_relation(&hyp.tokens, Mode::Float) else {
                continue;
            };
            if rel.dimension() != 1 || !closed_form_in_n(&rel.exprs()[0]) {
                continue;
            }
            let expr = rel.exprs()[0].clone();
            let mut worst: f64 = 0.0;
            let mut usable = true;
            for (&n, &r) in ns.iter().zip(&residual) {
                match eval_closed(&expr, n) {
                    Some(v) if v.is_finite() => worst = worst.max((v - r).abs()),
                    _ => {
                        usable = false;
                        break;
                    }
                }
            }
            if usable && best.as_ref().is_none_or(|(w, _)| worst < *w) {
                best = Some((worst, expr));
            }
        }
        let Some((_, expr)) = best else {
            break;
        };
        for (r, &n) in residual.iter_mut().zip(ns) {
            *r -= eval_closed(&expr, n).unwrap_or(f64::NAN);
        }
        let after = residual.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        rounds.push(RefinementRound {
            expression: expr.to_prefix().join(" "),
            residual_before: before,
            residual_after: after,
        });
        acc = Some(match acc {
            None => expr,
            Some(prev) => Expr::binary(Op::Add, prev, expr),
        });
    }
    match acc {
        Some(expression) => Ok(RefinementResult { expression, rounds }),
        None => Err(EvalError::NoCandidate),
    }
}

// ---------------------------------------------------------------------------
// reference special functions for approximation oracles
// ---------------------------------------------------------------------------

/// Bessel function of the first kind, order zero. Abramowitz & Stegun
/// 9.4.1 / 9.4.3 polynomial approximations, absolute error below 1e-7.
pub fn bessel_j0(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 3.0 {
        let t = (ax / 3.0) * (ax / 3.0);
        1.0 + t
            * (-2.249_999_7
                + t * (1.265_620_8
                    + t * (-0.316_386_6
                        + t * (0.044_447_9 + t * (-0.003_944_4 + t * 0.000_210_0)))))
    } else {
        let t = 3.0 / ax;
        let f = 0.797_884_56
            + t * (-0.000_000_77
                + t * (-0.005_527_40
                    + t * (-0.000_095_12
                        + t * (0.001_372_37 + t * (-0.000_728_05 + t * 0.000_144_76)))));
        let theta = ax - 0.785_398_16
            + t * (-0.041_663_97
                + t * (-0.000_039_54
                    + t * (0.002_625_73
                        + t * (-0.000_541_25 + t * (-0.000_293_33 + t * 0.000_135_58)))));
        f * theta.cos() / ax.sqrt()
    }
}
