//! Greedy and length-normalized beam decoding, plus the embedding cosine
//! similarity export.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::model::nn::{Model, ModelError, Scalar};

/// A finished decode: generated tokens (no BOS/EOS) and the log-likelihood
/// normalized by generated length (EOS included when present).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub norm_log_likelihood: f64,
    pub finished: bool,
}

fn log_softmax_row<S: Scalar>(row: ndarray::ArrayView1<S>) -> Vec<f64> {
    let max = row
        .iter()
        .map(|x| x.to_f64_())
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|x| (x.to_f64_() - max).exp()).sum();
    let log_z = max + sum.ln();
    row.iter().map(|x| x.to_f64_() - log_z).collect()
}

/// Argmax token per step until EOS or `max_len` generated tokens.
pub fn greedy_decode<S: Scalar>(
    model: &Model<S>,
    src: &[u32],
    max_len: usize,
    bos: u32,
    eos: u32,
) -> Result<Hypothesis, ModelError> {
    let enc = model.encode(src)?;
    let mut prefix = vec![bos];
    let mut total = 0.0;
    let mut tokens = Vec::new();
    let mut finished = false;
    for _ in 0..max_len {
        let dec = model.decode(&enc, &prefix)?;
        let probs = log_softmax_row(dec.logits.row(dec.logits.nrows() - 1));
        let (best, best_lp) = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty vocabulary");
        total += best_lp;
        if best as u32 == eos {
            finished = true;
            break;
        }
        tokens.push(best as u32);
        prefix.push(best as u32);
    }
    let generated = tokens.len() + finished as usize;
    Ok(Hypothesis {
        tokens,
        norm_log_likelihood: total / generated.max(1) as f64,
        finished,
    })
}

/// Standard beam search. Live beams are ranked by raw log-likelihood during
/// the search; the returned list is sorted by length-normalized score,
/// non-increasing, at most `beam_size` entries.
pub fn beam_decode<S: Scalar>(
    model: &Model<S>,
    src: &[u32],
    beam_size: usize,
    max_len: usize,
    bos: u32,
    eos: u32,
) -> Result<Vec<Hypothesis>, ModelError> {
    assert!(beam_size >= 1);
    let enc = model.encode(src)?;
    // (generated tokens, raw log-likelihood)
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<(Vec<u32>, f64)> = Vec::new();
        for (tokens, score) in &live {
            let mut prefix = vec![bos];
            prefix.extend_from_slice(tokens);
            let dec = model.decode(&enc, &prefix)?;
            let probs = log_softmax_row(dec.logits.row(dec.logits.nrows() - 1));
            let mut ranked: Vec<(usize, f64)> = probs.into_iter().enumerate().collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
            for &(tok, lp) in ranked.iter().take(beam_size) {
                let total = score + lp;
                if tok as u32 == eos {
                    finished.push(Hypothesis {
                        tokens: tokens.clone(),
                        norm_log_likelihood: total / (tokens.len() + 1) as f64,
                        finished: true,
                    });
                } else {
                    let mut next = tokens.clone();
                    next.push(tok as u32);
                    candidates.push((next, total));
                }
            }
        }
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
        candidates.truncate(beam_size);
        live = candidates;
        if live.is_empty() {
            break;
        }
    }
    for (tokens, score) in live {
        if !tokens.is_empty() {
            finished.push(Hypothesis {
                norm_log_likelihood: score / tokens.len() as f64,
                tokens,
                finished: false,
            });
        }
    }
    finished.sort_by(|a, b| b.norm_log_likelihood.total_cmp(&a.norm_log_likelihood));
    finished.truncate(beam_size);
    Ok(finished)
}

/// Symmetric cosine-similarity matrix between embedding rows, unit diagonal.
pub fn embedding_similarity<S: Scalar>(
    model: &Model<S>,
    ids: &[u32],
) -> Result<Array2<f64>, ModelError> {
    let rows: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            if id as usize >= model.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab: model.config.vocab_size,
                });
            }
            Ok(model
                .embedding
                .row(id as usize)
                .iter()
                .map(|x| x.to_f64_())
                .collect())
        })
        .collect::<Result<_, _>>()?;
    let norms: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let n = rows.len();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        out[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let sim = dot / (norms[i] * norms[j]);
            out[[i, j]] = sim;
            out[[j, i]] = sim;
        }
    }
    Ok(out)
}

/// CSV export: header row of token labels, then one row per token with the
/// label in the first column.
pub fn write_similarity_csv(
    labels: &[String],
    matrix: &Array2<f64>,
    out: &mut dyn Write,
) -> std::io::Result<()> {
    assert_eq!(labels.len(), matrix.nrows());
    writeln!(out, "token,{}", labels.join(","))?;
    for (label, row) in labels.iter().zip(matrix.rows()) {
        let cells: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
        writeln!(out, "{label},{}", cells.join(","))?;
    }
    Ok(())
}

/// Parses the CSV back into labels and a matrix (used by tooling and tests).
pub fn read_similarity_csv(text: &str) -> Option<(Vec<String>, Array2<f64>)> {
    let mut lines = text.lines();
    let header = lines.next()?;
    let labels: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    let n = labels.len();
    let mut matrix = Array2::zeros((n, n));
    for (i, line) in lines.enumerate() {
        let mut cells = line.split(',');
        let label = cells.next()?;
        if label != labels.get(i)? {
            return None;
        }
        for (j, cell) in cells.enumerate() {
            matrix[[i, j]] = cell.parse().ok()?;
        }
    }
    Some((labels, matrix))
}
