//! Token codecs: integers in base b, floats as sign/mantissa/exponent,
//! sequences and relations over a fixed vocabulary with a serializable
//! manifest.

use std::collections::HashMap;
use std::fmt::Write as _;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{Signed, Zero};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::expr::{
    magnitude_limit, Mode, ParseError, RecurrenceRelation, Value, FLOAT_BINARY, FLOAT_UNARY,
    INTEGER_BINARY, INTEGER_UNARY, MAX_DEGREE, MAX_DIMS,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegerEncodingConfig {
    /// Digit base. 10,000 keeps any admissible integer within 26 tokens.
    pub base: u32,
}

impl Default for IntegerEncodingConfig {
    fn default() -> Self {
        IntegerEncodingConfig { base: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloatEncodingConfig {
    /// Significant decimal digits carried by one mantissa token.
    pub digits_per_token: u32,
    /// Mantissa tokens per number; 2 doubles the precision.
    pub mantissa_tokens: usize,
    pub exponent_min: i32,
    pub exponent_max: i32,
}

impl Default for FloatEncodingConfig {
    fn default() -> Self {
        FloatEncodingConfig {
            digits_per_token: 4,
            mantissa_tokens: 1,
            exponent_min: -100,
            exponent_max: 100,
        }
    }
}

impl FloatEncodingConfig {
    pub fn significant_digits(&self) -> u32 {
        self.digits_per_token * self.mantissa_tokens as u32
    }

    /// Relative precision of the rounded representation.
    pub fn precision(&self) -> f64 {
        10f64.powi(1 - self.significant_digits() as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub integer: IntegerEncodingConfig,
    pub float: FloatEncodingConfig,
}

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("magnitude exceeds 10^100")]
    Overflow,
    #[error("value is not finite")]
    NonFinite,
    #[error("exponent {0} outside the representable range")]
    ExponentOutOfRange(i32),
    #[error("token `{0}` is not in the vocabulary")]
    OutOfVocabulary(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("token stream ended early")]
    Truncated,
    #[error("expected a sign token, found `{0}`")]
    ExpectedSign(String),
    #[error("expected a digit token, found `{0}`")]
    ExpectedDigit(String),
    #[error("expected an exponent token, found `{0}`")]
    ExpectedExponent(String),
    #[error("leading zero digit in a multi-digit integer")]
    LeadingZero,
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(u32),
    #[error("invalid expression: {0}")]
    InvalidExpression(ParseError),
    #[error("expression violates degree or dimension bounds")]
    OutOfBounds,
}

// ---------------------------------------------------------------------------
// number codecs (token strings)
// ---------------------------------------------------------------------------

/// Sign token, then base-b digits most significant first. Zero is `[+, 0]`.
pub fn encode_integer(x: &BigInt, cfg: &IntegerEncodingConfig) -> Result<Vec<String>, EncodeError> {
    if x.magnitude() > magnitude_limit().magnitude() {
        return Err(EncodeError::Overflow);
    }
    let mut tokens = vec![if x.is_negative() { "-" } else { "+" }.to_string()];
    let mut digits = Vec::new();
    let mut rest = x.abs();
    let base = BigInt::from(cfg.base);
    loop {
        let (q, r) = rest.div_rem(&base);
        digits.push(r.to_string());
        rest = q;
        if rest.is_zero() {
            break;
        }
    }
    digits.reverse();
    tokens.extend(digits);
    Ok(tokens)
}

fn parse_sign(token: &str) -> Result<i32, DecodeError> {
    match token {
        "+" => Ok(1),
        "-" => Ok(-1),
        other => Err(DecodeError::ExpectedSign(other.to_string())),
    }
}

fn parse_digit(token: &str, base: u32) -> Option<u32> {
    let d: u32 = token.parse().ok()?;
    // reject non-canonical spellings such as "007"
    if token != d.to_string() || d >= base {
        return None;
    }
    Some(d)
}

/// Decodes one integer starting at `tokens[0]`; returns the value and the
/// number of tokens consumed. Digits run until the next sign token or the
/// end of the stream.
pub fn decode_integer(
    tokens: &[String],
    cfg: &IntegerEncodingConfig,
) -> Result<(BigInt, usize), DecodeError> {
    let sign = parse_sign(tokens.first().ok_or(DecodeError::Truncated)?)?;
    let mut value = BigInt::zero();
    let mut used = 1;
    for token in &tokens[1..] {
        if token == "+" || token == "-" {
            break;
        }
        let d = parse_digit(token, cfg.base)
            .ok_or_else(|| DecodeError::ExpectedDigit(token.clone()))?;
        if used > 1 && value.is_zero() {
            return Err(DecodeError::LeadingZero);
        }
        value = value * cfg.base + d;
        used += 1;
    }
    if used == 1 {
        let found = tokens.get(1).cloned().unwrap_or_default();
        return Err(DecodeError::ExpectedDigit(found));
    }
    Ok((BigInt::from(sign) * value, used))
}

/// Sign, `m` mantissa tokens (most significant first), exponent token.
/// The encoded value is `sign * mantissa * 10^exponent` where `mantissa`
/// is the concatenated digits read as an integer.
pub fn encode_float(x: f64, cfg: &FloatEncodingConfig) -> Result<Vec<String>, EncodeError> {
    if !x.is_finite() {
        return Err(EncodeError::NonFinite);
    }
    let digits = cfg.significant_digits() as usize;
    if x == 0.0 {
        let mut tokens = vec!["+".to_string()];
        tokens.extend(std::iter::repeat_n("0".to_string(), cfg.mantissa_tokens));
        tokens.push("E0".to_string());
        return Ok(tokens);
    }
    // std float formatting rounds to nearest, ties to even
    let formatted = format!("{:.*e}", digits - 1, x.abs());
    let (mantissa_str, exp_str) = formatted.split_once('e').expect("scientific format");
    let digit_str: String = mantissa_str.chars().filter(|c| *c != '.').collect();
    debug_assert_eq!(digit_str.len(), digits);
    let exponent = exp_str.parse::<i32>().expect("scientific format") - (digits as i32 - 1);
    if exponent < cfg.exponent_min || exponent > cfg.exponent_max {
        return Err(EncodeError::ExponentOutOfRange(exponent));
    }
    let mut tokens = vec![if x < 0.0 { "-" } else { "+" }.to_string()];
    for chunk in 0..cfg.mantissa_tokens {
        let w = cfg.digits_per_token as usize;
        let part: u32 = digit_str[chunk * w..(chunk + 1) * w].parse().unwrap();
        tokens.push(part.to_string());
    }
    let mut exp_token = String::from("E");
    write!(exp_token, "{exponent}").unwrap();
    tokens.push(exp_token);
    Ok(tokens)
}

/// Decodes one float starting at `tokens[0]`; returns the value and the
/// number of tokens consumed (always `m + 2`).
pub fn decode_float(
    tokens: &[String],
    cfg: &FloatEncodingConfig,
) -> Result<(f64, usize), DecodeError> {
    let width = cfg.mantissa_tokens + 2;
    if tokens.len() < width {
        return Err(DecodeError::Truncated);
    }
    let sign = parse_sign(&tokens[0])?;
    let per = 10u64.pow(cfg.digits_per_token);
    let mut mantissa = 0u64;
    for token in &tokens[1..=cfg.mantissa_tokens] {
        let d = parse_digit(token, per as u32)
            .ok_or_else(|| DecodeError::ExpectedDigit(token.clone()))?;
        mantissa = mantissa * per + d as u64;
    }
    let exp_token = &tokens[cfg.mantissa_tokens + 1];
    let exponent: i32 = exp_token
        .strip_prefix('E')
        .and_then(|e| e.parse().ok())
        .filter(|e| (cfg.exponent_min..=cfg.exponent_max).contains(e))
        .ok_or_else(|| DecodeError::ExpectedExponent(exp_token.clone()))?;
    // format-and-parse gives the correctly rounded binary value
    let value: f64 = format!("{mantissa}e{exponent}").parse().unwrap();
    Ok((sign as f64 * value, width))
}

// ---------------------------------------------------------------------------
// sequence and relation codecs
// ---------------------------------------------------------------------------

fn encode_value(v: &Value, cfg: &EncodingConfig) -> Result<Vec<String>, EncodeError> {
    match v {
        Value::Int(x) => encode_integer(x, &cfg.integer),
        Value::Float(x) => encode_float(*x, &cfg.float),
    }
}

/// Encodes terms in order; each number's sign token doubles as the
/// delimiter. Multidimensional inputs should be interleaved first.
pub fn encode_terms(terms: &[Value], cfg: &EncodingConfig) -> Result<Vec<String>, EncodeError> {
    let mut out = Vec::new();
    for term in terms {
        out.extend(encode_value(term, cfg)?);
    }
    Ok(out)
}

pub fn decode_terms(
    tokens: &[String],
    mode: Mode,
    cfg: &EncodingConfig,
) -> Result<Vec<Value>, DecodeError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < tokens.len() {
        let rest = &tokens[pos..];
        let (value, used) = match mode {
            Mode::Integer => {
                let (x, used) = decode_integer(rest, &cfg.integer)?;
                (Value::Int(x), used)
            }
            Mode::Float => {
                let (x, used) = decode_float(rest, &cfg.float)?;
                (Value::Float(x), used)
            }
        };
        out.push(value);
        pos += used;
    }
    Ok(out)
}

/// Prefix traversal per dimension, joined by `del`.
pub fn encode_relation(rel: &RecurrenceRelation) -> Vec<String> {
    let mut out = Vec::new();
    for (i, expr) in rel.exprs().iter().enumerate() {
        if i > 0 {
            out.push("del".to_string());
        }
        out.extend(expr.to_prefix());
    }
    out
}

/// Parses and validates a predicted relation. Any failure is the
/// invalid-prediction case tracked by the evaluation statistics.
pub fn decode_relation(
    tokens: &[String],
    mode: Mode,
) -> Result<RecurrenceRelation, DecodeError> {
    let mut exprs = Vec::new();
    for part in tokens.split(|t| t == "del") {
        exprs.push(crate::expr::parse_prefix(part, mode).map_err(DecodeError::InvalidExpression)?);
    }
    let dims = exprs.len();
    if dims > MAX_DIMS {
        return Err(DecodeError::OutOfBounds);
    }
    let in_bounds = exprs.iter().all(|e| {
        e.effective_degree() <= MAX_DEGREE && e.max_dim().map_or(true, |d| d < dims)
    });
    if !in_bounds {
        return Err(DecodeError::OutOfBounds);
    }
    Ok(RecurrenceRelation::new(exprs))
}

// ---------------------------------------------------------------------------
// vocabulary
// ---------------------------------------------------------------------------

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const DEL_TOKEN: &str = "del";

const MANIFEST_VERSION: u32 = 1;

/// Bijective token table shared by the encoder and decoder sides. The order
/// is a pure function of the config, so ids are stable across runs.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    config: EncodingConfig,
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

/// A vocabulary-indexed token list, the model's I/O unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub role: Role,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Number,
    Sequence,
    Relation,
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabularyManifest {
    version: u32,
    config: EncodingConfig,
    tokens: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("malformed manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported manifest version {0}")]
    Version(u32),
    #[error("duplicate token `{0}`")]
    Duplicate(String),
}

impl Vocabulary {
    pub fn build(config: EncodingConfig) -> Vocabulary {
        let mut tokens: Vec<String> = Vec::new();
        let push = |t: String, tokens: &mut Vec<String>| {
            if !tokens.contains(&t) {
                tokens.push(t);
            }
        };
        for t in [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, DEL_TOKEN, "+", "-"] {
            tokens.push(t.to_string());
        }
        let numerals = config
            .integer
            .base
            .max(10u32.pow(config.float.digits_per_token));
        for d in 0..numerals {
            tokens.push(d.to_string());
        }
        for e in config.float.exponent_min..=config.float.exponent_max {
            tokens.push(format!("E{e}"));
        }
        for set in [INTEGER_UNARY, INTEGER_BINARY, FLOAT_UNARY, FLOAT_BINARY] {
            for op in set {
                push(op.name().to_string(), &mut tokens);
            }
        }
        push("n".to_string(), &mut tokens);
        for letter in ['u', 'v', 'w'] {
            for offset in 1..=MAX_DEGREE {
                tokens.push(format!("{letter}{offset}"));
            }
        }
        tokens.push("xi".to_string());
        for c in 1..=10 {
            tokens.push(format!("-{c}"));
        }
        for c in ["e", "pi", "gamma"] {
            tokens.push(c.to_string());
        }
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            config,
            tokens,
            ids,
        }
    }

    pub fn config(&self) -> &EncodingConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn pad_id(&self) -> u32 {
        self.ids[PAD_TOKEN]
    }

    pub fn bos_id(&self) -> u32 {
        self.ids[BOS_TOKEN]
    }

    pub fn eos_id(&self) -> u32 {
        self.ids[EOS_TOKEN]
    }

    pub fn del_id(&self) -> u32 {
        self.ids[DEL_TOKEN]
    }

    pub fn to_ids(&self, tokens: &[String], role: Role) -> Result<TokenSequence, EncodeError> {
        let ids = tokens
            .iter()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| EncodeError::OutOfVocabulary(t.clone()))
            })
            .collect::<Result<Vec<u32>, _>>()?;
        Ok(TokenSequence { ids, role })
    }

    pub fn to_tokens(&self, ids: &[u32]) -> Result<Vec<String>, DecodeError> {
        ids.iter()
            .map(|&id| {
                self.token(id)
                    .map(str::to_string)
                    .ok_or(DecodeError::UnknownId(id))
            })
            .collect()
    }

    pub fn encode_terms(&self, terms: &[Value]) -> Result<TokenSequence, EncodeError> {
        self.to_ids(&encode_terms(terms, &self.config)?, Role::Sequence)
    }

    pub fn decode_terms(&self, ids: &[u32], mode: Mode) -> Result<Vec<Value>, DecodeError> {
        decode_terms(&self.to_tokens(ids)?, mode, &self.config)
    }

    pub fn encode_relation(&self, rel: &RecurrenceRelation) -> Result<TokenSequence, EncodeError> {
        self.to_ids(&encode_relation(rel), Role::Relation)
    }

    pub fn decode_relation(
        &self,
        ids: &[u32],
        mode: Mode,
    ) -> Result<RecurrenceRelation, DecodeError> {
        decode_relation(&self.to_tokens(ids)?, mode)
    }

    pub fn to_manifest(&self) -> String {
        let manifest = VocabularyManifest {
            version: MANIFEST_VERSION,
            config: self.config,
            tokens: self.tokens.clone(),
        };
        serde_json::to_string_pretty(&manifest).expect("manifest serialization")
    }

    pub fn from_manifest(text: &str) -> Result<Vocabulary, ManifestError> {
        let manifest: VocabularyManifest = serde_json::from_str(text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(ManifestError::Version(manifest.version));
        }
        let mut ids = HashMap::with_capacity(manifest.tokens.len());
        for (i, t) in manifest.tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(ManifestError::Duplicate(t.clone()));
            }
        }
        Ok(Vocabulary {
            config: manifest.config,
            tokens: manifest.tokens,
            ids,
        })
    }

    /// Hash of the manifest; checkpoints pin this so decoding stays
    /// reproducible.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_manifest().as_bytes());
        digest.iter().fold(String::new(), |mut acc, b| {
            write!(acc, "{b:02x}").unwrap();
            acc
        })
    }
}
