//! Optimization: Adam with the warmup/inverse-sqrt schedule, batch
//! construction from generated samples, the training loop, checkpoints, and
//! the metrics log.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{EncodeError, Vocabulary};
use crate::expr::{Mode, Value};
use crate::generator::{GeneratedSample, GeneratorConfig, GeneratorError, TrainingBatchStream};
use crate::model::nn::{Model, ModelError, Scalar, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Uniform upper bound for the per-sample corruption level (float mode).
    pub sigma_train: f64,
    /// Numeric task: how many trailing terms become the target.
    pub n_pred: usize,
    pub lr_floor: f64,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Label-smoothing mass spread uniformly over the vocabulary.
    pub label_smoothing: f64,
    pub log_every: u64,
    /// Examples longer than the model's positions are skipped and counted.
    pub max_src_len: usize,
    pub max_tgt_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 32,
            seed: 0,
            sigma_train: 0.0,
            n_pred: 10,
            lr_floor: 1e-7,
            lr_peak: 2e-4,
            warmup_steps: 10_000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            label_smoothing: 0.0,
            log_every: 50,
            max_src_len: 510,
            max_tgt_len: 100,
        }
    }
}

/// Linear warmup from `lr_floor` to `lr_peak` over `warmup_steps`, then
/// inverse-square-root decay, continuous at the junction.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step <= cfg.warmup_steps {
        let frac = step as f64 / cfg.warmup_steps as f64;
        cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * frac
    } else {
        cfg.lr_peak * (cfg.warmup_steps as f64 / step as f64).sqrt()
    }
}

/// One teacher-forced training example in token ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub src: Vec<u32>,
    pub dec_input: Vec<u32>,
    pub targets: Vec<u32>,
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("source length {0} over limit")]
    SrcTooLong(usize),
    #[error("target length {0} over limit")]
    TgtTooLong(usize),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("sample shorter than the requested prediction window")]
    TooShort,
}

/// Builds model examples from generated samples for either task.
pub struct ExampleBuilder<'a> {
    pub vocab: &'a Vocabulary,
    pub task: Task,
    pub n_pred: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
}

impl<'a> ExampleBuilder<'a> {
    pub fn build(
        &self,
        sample: &GeneratedSample,
        input_override: Option<&[Value]>,
    ) -> Result<Example, BuildError> {
        let interleaved = sample.interleaved_terms();
        let input_terms: &[Value] = input_override.unwrap_or(&interleaved);
        let (src_terms, tgt_tokens) = match self.task {
            Task::Symbolic => {
                let t = self.vocab.encode_relation(&sample.relation)?;
                (input_terms.to_vec(), t.ids)
            }
            Task::Numeric => {
                let dims = sample.sequences.len();
                let cut = input_terms
                    .len()
                    .checked_sub(self.n_pred * dims)
                    .ok_or(BuildError::TooShort)?;
                if cut == 0 {
                    return Err(BuildError::TooShort);
                }
                let tgt = self.vocab.encode_terms(&interleaved[cut..])?;
                (input_terms[..cut].to_vec(), tgt.ids)
            }
        };
        let src = self.vocab.encode_terms(&src_terms)?.ids;
        if src.len() > self.max_src_len {
            return Err(BuildError::SrcTooLong(src.len()));
        }
        if tgt_tokens.len() + 1 > self.max_tgt_len {
            return Err(BuildError::TgtTooLong(tgt_tokens.len()));
        }
        let bos = self.vocab.bos_id();
        let eos = self.vocab.eos_id();
        let mut dec_input = vec![bos];
        dec_input.extend_from_slice(&tgt_tokens);
        let mut targets = tgt_tokens;
        targets.push(eos);
        Ok(Example {
            src,
            dec_input,
            targets,
        })
    }
}

/// Mutable training state; exactly one thread drives it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState<S> {
    pub model: Model<S>,
    moment1: Model<S>,
    moment2: Model<S>,
    pub step: u64,
    /// Generator stream position, so resumed runs see the same data.
    pub samples_consumed: u64,
    pub skipped_samples: u64,
    pub vocab_hash: String,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged to NaN at step {step}")]
    Diverged { step: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("vocabulary hash mismatch: checkpoint has {found}, expected {expected}")]
    VocabMismatch { found: String, expected: String },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<serde_json::Value>,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile<S> {
    version: u32,
    state: TrainState<S>,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(model: Model<S>, vocab_hash: String) -> TrainState<S> {
        let moment1 = model.zeros_like();
        let moment2 = model.zeros_like();
        TrainState {
            model,
            moment1,
            moment2,
            step: 0,
            samples_consumed: 0,
            skipped_samples: 0,
            vocab_hash,
        }
    }

    /// One optimization step over a batch of examples. Returns the mean
    /// per-example loss.
    pub fn step_batch(&mut self, batch: &[Example], cfg: &TrainConfig, pad_id: u32) -> Result<f64, TrainError> {
        assert!(!batch.is_empty());
        let mut grads = self.model.zeros_like();
        let mut total = 0.0;
        for ex in batch {
            total += self.model.example_loss_and_grad(
                &mut grads,
                &ex.src,
                &ex.dec_input,
                &ex.targets,
                pad_id,
                cfg.label_smoothing,
            )?;
        }
        let loss = total / batch.len() as f64;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step: self.step });
        }
        let scale = S::of_f64(1.0 / batch.len() as f64);
        for g in grads.params_mut() {
            g.mapv_inplace(|x| x * scale);
        }
        if cfg.grad_clip > 0.0 {
            let mut sq = 0.0;
            for g in grads.params_mut() {
                sq += g.iter().map(|&x| x.to_f64_().powi(2)).sum::<f64>();
            }
            let norm = sq.sqrt();
            if norm > cfg.grad_clip {
                let shrink = S::of_f64(cfg.grad_clip / norm);
                for g in grads.params_mut() {
                    g.mapv_inplace(|x| x * shrink);
                }
            }
        }
        self.step += 1;
        let lr = lr_at(self.step, cfg);
        self.apply_adam(&mut grads, lr, cfg);
        Ok(loss)
    }

    fn apply_adam(&mut self, grads: &mut Model<S>, lr: f64, cfg: &TrainConfig) {
        let b1 = S::of_f64(cfg.adam_beta1);
        let b2 = S::of_f64(cfg.adam_beta2);
        let one = S::one();
        let t = self.step as i32;
        let corr1 = S::of_f64(1.0 - cfg.adam_beta1.powi(t));
        let corr2 = S::of_f64(1.0 - cfg.adam_beta2.powi(t));
        let eps = S::of_f64(cfg.adam_eps);
        let lr = S::of_f64(lr);
        let mut params = self.model.params_mut();
        let mut m1 = self.moment1.params_mut();
        let mut m2 = self.moment2.params_mut();
        let gs = grads.params_mut();
        for (((p, m), v), g) in params
            .iter_mut()
            .zip(m1.iter_mut())
            .zip(m2.iter_mut())
            .zip(gs.iter())
        {
            ndarray::Zip::from(&mut **p)
                .and(&mut **m)
                .and(&mut **v)
                .and(&**g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / corr1;
                    let vhat = *v / corr2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    pub fn save(&self, out: &mut dyn Write) -> Result<(), TrainError> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            state: self.clone(),
        };
        serde_json::to_writer(out, &file).map_err(|e| TrainError::Checkpoint(e.to_string()))
    }

    pub fn load(input: &mut dyn std::io::Read, expected_vocab_hash: Option<&str>) -> Result<TrainState<S>, TrainError> {
        let file: CheckpointFile<S> =
            serde_json::from_reader(input).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if file.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                file.version
            )));
        }
        if let Some(expected) = expected_vocab_hash {
            if file.state.vocab_hash != expected {
                return Err(TrainError::VocabMismatch {
                    found: file.state.vocab_hash,
                    expected: expected.to_string(),
                });
            }
        }
        Ok(file.state)
    }
}

/// Trains against the on-the-fly generator stream. Samples that fail to
/// encode (too long, out of range) are skipped and counted. A fixed seed on
/// a single thread reproduces the loss curve exactly.
pub fn train_stream<S: Scalar>(
    state: &mut TrainState<S>,
    gen_cfg: &GeneratorConfig,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    metrics_out: &mut dyn Write,
    mut eval_hook: Option<&mut dyn FnMut(&TrainState<S>) -> serde_json::Value>,
) -> Result<(), TrainError> {
    let builder = ExampleBuilder {
        vocab,
        task: state.model.config.task,
        n_pred: cfg.n_pred,
        max_src_len: cfg.max_src_len.min(state.model.config.max_positions),
        max_tgt_len: cfg.max_tgt_len.min(state.model.config.max_positions),
    };
    let mut stream = TrainingBatchStream::new(gen_cfg.clone(), cfg.sigma_train, cfg.seed, 0);
    stream.seek(state.samples_consumed);
    let pad_id = vocab.pad_id();
    while state.step < cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            let corrupted = stream.next().expect("stream is endless")?;
            state.samples_consumed = stream.position();
            let noisy: Vec<Value> = interleave(&corrupted.noisy_sequences);
            let input = if gen_cfg.mode == Mode::Float {
                Some(noisy.as_slice())
            } else {
                None
            };
            match builder.build(&corrupted.sample, input) {
                Ok(ex) => batch.push(ex),
                Err(_) => state.skipped_samples += 1,
            }
        }
        let loss = state.step_batch(&batch, cfg, pad_id)?;
        if state.step % cfg.log_every == 0 || state.step == cfg.steps {
            let eval = eval_hook.as_mut().map(|h| h(state));
            let record = MetricsRecord {
                step: state.step,
                loss,
                lr: lr_at(state.step, cfg),
                eval,
            };
            serde_json::to_writer(&mut *metrics_out, &record)
                .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            metrics_out.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn interleave(seqs: &[Vec<Value>]) -> Vec<Value> {
    let len = seqs[0].len();
    let mut out = Vec::with_capacity(len * seqs.len());
    for i in 0..len {
        for seq in seqs {
            out.push(seq[i].clone());
        }
    }
    out
}

/// Deterministic model initialization from a seed.
pub fn init_model<S: Scalar>(
    config: crate::model::nn::ModelConfig,
    seed: u64,
) -> Result<Model<S>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::init(config, &mut rng)
}
