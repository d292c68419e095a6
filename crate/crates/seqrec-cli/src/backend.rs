//! Prediction backends: a trained checkpoint, or a brute-force enumeration
//! stub that fits the observed terms directly. Both expose the same
//! `Predictor` interface, so every evaluation command accepts either.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use seqrec_core::encoding::Vocabulary;
use seqrec_core::evaluation::{ModelPredictor, Predictor};
use seqrec_core::expr::Mode;
use seqrec_core::model::{Hypothesis, TrainState};
use seqrec_core::oracle::{fit_by_enumeration, EnumerationSpace};

use crate::settings::{data, Failure};

pub fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<TrainState<f32>, Failure> {
    let file = File::open(path)
        .map_err(|e| data(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let mut reader = BufReader::new(file);
    TrainState::load(&mut reader, Some(&vocab.hash()))
        .map_err(|e| data(format!("bad checkpoint {}: {e}", path.display())))
}

/// Enumeration-backed stub: decodes the input terms, searches the bounded
/// expression space, and re-encodes the Occam-ranked fits as hypotheses.
pub struct OraclePredictor<'a> {
    pub vocab: &'a Vocabulary,
    pub mode: Mode,
    pub space: EnumerationSpace,
    pub tau: f64,
    pub beam_size: usize,
    /// Bypass the enumeration size guard.
    pub force: bool,
}

impl Predictor for OraclePredictor<'_> {
    fn predict(&self, src: &[u32]) -> Vec<Hypothesis> {
        let Ok(observed) = self.vocab.decode_terms(src, self.mode) else {
            return Vec::new();
        };
        let Ok(candidates) = fit_by_enumeration(&observed, &self.space, self.tau, self.force) else {
            return Vec::new();
        };
        candidates
            .iter()
            .take(self.beam_size)
            .filter_map(|c| {
                let tokens = self.vocab.encode_relation(&c.relation).ok()?.ids;
                Some(Hypothesis {
                    tokens,
                    // surrogate score: shorter fits rank higher
                    norm_log_likelihood: -(c.ops as f64),
                    finished: true,
                })
            })
            .collect()
    }
}

/// Either backend, plus the beam settings shared by all consumers.
pub enum Backend {
    Checkpoint(Box<TrainState<f32>>),
    Oracle {
        space: EnumerationSpace,
        tau: f64,
        force: bool,
    },
}

impl Backend {
    pub fn predictor<'a>(
        &'a self,
        vocab: &'a Vocabulary,
        mode: Mode,
        beam_size: usize,
        max_len: usize,
    ) -> Box<dyn Predictor + 'a> {
        match self {
            Backend::Checkpoint(state) => Box::new(ModelPredictor {
                model: &state.model,
                bos: vocab.bos_id(),
                eos: vocab.eos_id(),
                beam_size,
                max_len,
            }),
            Backend::Oracle { space, tau, force } => Box::new(OraclePredictor {
                vocab,
                mode,
                space: space.clone(),
                tau: *tau,
                beam_size,
                force: *force,
            }),
        }
    }
}
