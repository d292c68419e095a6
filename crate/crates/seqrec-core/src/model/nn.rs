//! Encoder-decoder transformer with explicit forward traces and manual
//! backprop. Pre-layer-norm blocks, learned absolute positions, ReLU
//! feed-forward. Generic over the scalar type so the same code runs in f32
//! for speed and f64 for finite-difference verification.

use ndarray::{s, Array1, Array2, Axis, NdFloat};
use num_traits::{FromPrimitive, ToPrimitive};
use rand::Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

pub trait Scalar:
    NdFloat + FromPrimitive + ToPrimitive + Serialize + DeserializeOwned + Default
{
    fn of_f64(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64")
    }
    fn to_f64_(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Decode a recurrence relation in prefix notation.
    Symbolic,
    /// Decode the next terms directly as numbers.
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub task: Task,
}

impl ModelConfig {
    /// Small configuration that trains on a single core.
    pub fn desk_scale(vocab_size: usize, task: Task) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 4,
            dim: 64,
            ff_dim: 256,
            max_positions: 512,
            vocab_size,
            task,
        }
    }

    /// The reference configuration (8 layers, 8 heads, 512 dims).
    pub fn full_scale(vocab_size: usize, task: Task) -> ModelConfig {
        ModelConfig {
            layers: 8,
            heads: 8,
            dim: 512,
            ff_dim: 2048,
            max_positions: 1024,
            vocab_size,
            task,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::BadConfig(
                "embedding dim must be a positive multiple of heads".into(),
            ));
        }
        if self.layers == 0 || self.ff_dim == 0 || self.max_positions == 0 || self.vocab_size == 0 {
            return Err(ModelError::BadConfig("zero-sized dimension".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence length {len} exceeds max positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty sequence")]
    Empty,
}

// All parameters are Array2 (vectors as 1 x D rows) so the whole model can
// be walked as a flat list in a fixed order.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear<S> {
    pub w: Array2<S>,
    pub b: Array2<S>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm<S> {
    pub gamma: Array2<S>,
    pub beta: Array2<S>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Attention<S> {
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedForward<S> {
    pub w1: Linear<S>,
    pub w2: Linear<S>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderLayer<S> {
    pub ln1: LayerNorm<S>,
    pub attn: Attention<S>,
    pub ln2: LayerNorm<S>,
    pub ff: FeedForward<S>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderLayer<S> {
    pub ln1: LayerNorm<S>,
    pub self_attn: Attention<S>,
    pub ln2: LayerNorm<S>,
    pub cross_attn: Attention<S>,
    pub ln3: LayerNorm<S>,
    pub ff: FeedForward<S>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub embedding: Array2<S>,
    pub enc_pos: Array2<S>,
    pub dec_pos: Array2<S>,
    pub enc_layers: Vec<EncoderLayer<S>>,
    pub dec_layers: Vec<DecoderLayer<S>>,
    pub enc_ln: LayerNorm<S>,
    pub dec_ln: LayerNorm<S>,
    pub out: Linear<S>,
}

const LN_EPS: f64 = 1e-5;

impl<S: Scalar> Linear<S> {
    fn init(rng: &mut impl Rng, d_in: usize, d_out: usize) -> Linear<S> {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        Linear {
            w: Array2::from_shape_fn((d_in, d_out), |_| S::of_f64(rng.gen_range(-bound..bound))),
            b: Array2::zeros((1, d_out)),
        }
    }

    fn zeros_like(&self) -> Linear<S> {
        Linear {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array2::zeros(self.b.raw_dim()),
        }
    }

    fn forward(&self, x: &Array2<S>) -> Array2<S> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates dW/db into `grad` and returns dX.
    fn backward(&self, grad: &mut Linear<S>, x: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl<S: Scalar> LayerNorm<S> {
    fn init(dim: usize) -> LayerNorm<S> {
        LayerNorm {
            gamma: Array2::ones((1, dim)),
            beta: Array2::zeros((1, dim)),
        }
    }

    fn zeros_like(&self) -> LayerNorm<S> {
        LayerNorm {
            gamma: Array2::zeros(self.gamma.raw_dim()),
            beta: Array2::zeros(self.beta.raw_dim()),
        }
    }

    /// Returns (normalized output, (x_hat, inverse std per row)).
    fn forward(&self, x: &Array2<S>) -> (Array2<S>, (Array2<S>, Array1<S>)) {
        let d = S::of_f64(x.ncols() as f64);
        let mean = x.sum_axis(Axis(1)) / d;
        let mut xhat = x.clone();
        for (mut row, &m) in xhat.axis_iter_mut(Axis(0)).zip(mean.iter()) {
            row.mapv_inplace(|v| v - m);
        }
        let inv_std = xhat
            .axis_iter(Axis(0))
            .map(|row| {
                let var = row.iter().map(|&v| v * v).fold(S::zero(), |a, b| a + b) / d;
                S::one() / (var + S::of_f64(LN_EPS)).sqrt()
            })
            .collect::<Array1<S>>();
        for (mut row, &is) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter()) {
            row.mapv_inplace(|v| v * is);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, (xhat, inv_std))
    }

    fn backward(
        &self,
        grad: &mut LayerNorm<S>,
        cache: &(Array2<S>, Array1<S>),
        dy: &Array2<S>,
    ) -> Array2<S> {
        let (xhat, inv_std) = cache;
        grad.gamma += &(dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d = S::of_f64(dy.ncols() as f64);
        let g = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let g_row = g.row(i);
            let xh_row = xhat.row(i);
            let mean_g = g_row.sum() / d;
            let mean_gx = g_row
                .iter()
                .zip(xh_row.iter())
                .map(|(&a, &b)| a * b)
                .fold(S::zero(), |a, b| a + b)
                / d;
            let is = inv_std[i];
            for j in 0..dy.ncols() {
                dx[[i, j]] = (g_row[j] - mean_g - xh_row[j] * mean_gx) * is;
            }
        }
        dx
    }
}

/// Per-call record of everything backward needs.
pub struct AttnTrace<S> {
    q_in: Array2<S>,
    kv_in: Array2<S>,
    q: Array2<S>,
    k: Array2<S>,
    v: Array2<S>,
    /// Softmax weights, one (Tq, Tk) matrix per head.
    weights: Vec<Array2<S>>,
    concat: Array2<S>,
}

impl<S: Scalar> Attention<S> {
    fn init(rng: &mut impl Rng, dim: usize) -> Attention<S> {
        Attention {
            wq: Linear::init(rng, dim, dim),
            wk: Linear::init(rng, dim, dim),
            wv: Linear::init(rng, dim, dim),
            wo: Linear::init(rng, dim, dim),
        }
    }

    fn zeros_like(&self) -> Attention<S> {
        Attention {
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            wo: self.wo.zeros_like(),
        }
    }

    fn forward(
        &self,
        q_in: &Array2<S>,
        kv_in: &Array2<S>,
        heads: usize,
        causal: bool,
    ) -> (Array2<S>, AttnTrace<S>) {
        let dim = q_in.ncols();
        let dh = dim / heads;
        let scale = S::of_f64(1.0 / (dh as f64).sqrt());
        let q = self.wq.forward(q_in);
        let k = self.wk.forward(kv_in);
        let v = self.wv.forward(kv_in);
        let (tq, tk) = (q.nrows(), k.nrows());
        let mut concat = Array2::zeros((tq, dim));
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|x| x * scale);
            if causal {
                for i in 0..tq {
                    for j in (i + 1)..tk {
                        scores[[i, j]] = S::of_f64(f64::NEG_INFINITY);
                    }
                }
            }
            softmax_rows(&mut scores);
            concat.slice_mut(cols).assign(&scores.dot(&vh));
            weights.push(scores);
        }
        let out = self.wo.forward(&concat);
        let trace = AttnTrace {
            q_in: q_in.clone(),
            kv_in: kv_in.clone(),
            q,
            k,
            v,
            weights,
            concat,
        };
        (out, trace)
    }

    /// Returns (d q_in, d kv_in).
    fn backward(
        &self,
        grad: &mut Attention<S>,
        trace: &AttnTrace<S>,
        heads: usize,
        dy: &Array2<S>,
    ) -> (Array2<S>, Array2<S>) {
        let dim = trace.q.ncols();
        let dh = dim / heads;
        let scale = S::of_f64(1.0 / (dh as f64).sqrt());
        let d_concat = self.wo.backward(&mut grad.wo, &trace.concat, dy);
        let mut dq = Array2::zeros(trace.q.raw_dim());
        let mut dk = Array2::zeros(trace.k.raw_dim());
        let mut dv = Array2::zeros(trace.v.raw_dim());
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let a = &trace.weights[h];
            let vh = trace.v.slice(cols);
            let d_out_h = d_concat.slice(cols);
            // dV_h = A^T dOut_h
            dv.slice_mut(cols).assign(&a.t().dot(&d_out_h));
            // dA = dOut_h V_h^T, then softmax backward
            let da = d_out_h.dot(&vh.t());
            let mut ds = Array2::zeros(a.raw_dim());
            for i in 0..a.nrows() {
                let dot = da
                    .row(i)
                    .iter()
                    .zip(a.row(i).iter())
                    .map(|(&x, &y)| x * y)
                    .fold(S::zero(), |acc, z| acc + z);
                for j in 0..a.ncols() {
                    ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot);
                }
            }
            ds.mapv_inplace(|x| x * scale);
            let qh = trace.q.slice(cols);
            let kh = trace.k.slice(cols);
            dq.slice_mut(cols).assign(&ds.dot(&kh));
            dk.slice_mut(cols).assign(&ds.t().dot(&qh));
        }
        let d_qin = self.wq.backward(&mut grad.wq, &trace.q_in, &dq);
        let mut d_kvin = self.wk.backward(&mut grad.wk, &trace.kv_in, &dk);
        d_kvin += &self.wv.backward(&mut grad.wv, &trace.kv_in, &dv);
        (d_qin, d_kvin)
    }
}

fn softmax_rows<S: Scalar>(scores: &mut Array2<S>) {
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(S::of_f64(f64::NEG_INFINITY), S::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

pub struct FfTrace<S> {
    x: Array2<S>,
    hidden_pre: Array2<S>,
    hidden: Array2<S>,
}

impl<S: Scalar> FeedForward<S> {
    fn init(rng: &mut impl Rng, dim: usize, ff_dim: usize) -> FeedForward<S> {
        FeedForward {
            w1: Linear::init(rng, dim, ff_dim),
            w2: Linear::init(rng, ff_dim, dim),
        }
    }

    fn zeros_like(&self) -> FeedForward<S> {
        FeedForward {
            w1: self.w1.zeros_like(),
            w2: self.w2.zeros_like(),
        }
    }

    fn forward(&self, x: &Array2<S>) -> (Array2<S>, FfTrace<S>) {
        let hidden_pre = self.w1.forward(x);
        let hidden = hidden_pre.mapv(|v| v.max(S::zero()));
        let y = self.w2.forward(&hidden);
        (
            y,
            FfTrace {
                x: x.clone(),
                hidden_pre,
                hidden,
            },
        )
    }

    fn backward(&self, grad: &mut FeedForward<S>, trace: &FfTrace<S>, dy: &Array2<S>) -> Array2<S> {
        let mut d_hidden = self.w2.backward(&mut grad.w2, &trace.hidden, dy);
        ndarray::Zip::from(&mut d_hidden)
            .and(&trace.hidden_pre)
            .for_each(|d, &pre| {
                if pre <= S::zero() {
                    *d = S::zero();
                }
            });
        self.w1.backward(&mut grad.w1, &trace.x, &d_hidden)
    }
}

pub struct EncoderLayerTrace<S> {
    ln1: (Array2<S>, Array1<S>),
    attn: AttnTrace<S>,
    ln2: (Array2<S>, Array1<S>),
    ff: FfTrace<S>,
}

pub struct DecoderLayerTrace<S> {
    ln1: (Array2<S>, Array1<S>),
    self_attn: AttnTrace<S>,
    ln2: (Array2<S>, Array1<S>),
    cross_attn: AttnTrace<S>,
    ln3: (Array2<S>, Array1<S>),
    ff: FfTrace<S>,
}

pub struct EncodeTrace<S> {
    pub ids: Vec<u32>,
    layers: Vec<EncoderLayerTrace<S>>,
    final_ln: (Array2<S>, Array1<S>),
    /// Encoder output fed to cross attention.
    pub memory: Array2<S>,
}

pub struct DecodeTrace<S> {
    ids: Vec<u32>,
    layers: Vec<DecoderLayerTrace<S>>,
    final_ln: (Array2<S>, Array1<S>),
    hidden: Array2<S>,
    pub logits: Array2<S>,
}

impl<S: Scalar> Model<S> {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Model<S>, ModelError> {
        config.validate()?;
        let d = config.dim;
        let emb_std = 1.0 / (d as f64).sqrt();
        let emb = |rows: usize, rng: &mut dyn rand::RngCore| {
            Array2::from_shape_fn((rows, d), |_| {
                S::of_f64(rng.gen_range(-emb_std..emb_std))
            })
        };
        Ok(Model {
            embedding: emb(config.vocab_size, rng),
            enc_pos: emb(config.max_positions, rng),
            dec_pos: emb(config.max_positions, rng),
            enc_layers: (0..config.layers)
                .map(|_| EncoderLayer {
                    ln1: LayerNorm::init(d),
                    attn: Attention::init(rng, d),
                    ln2: LayerNorm::init(d),
                    ff: FeedForward::init(rng, d, config.ff_dim),
                })
                .collect(),
            dec_layers: (0..config.layers)
                .map(|_| DecoderLayer {
                    ln1: LayerNorm::init(d),
                    self_attn: Attention::init(rng, d),
                    ln2: LayerNorm::init(d),
                    cross_attn: Attention::init(rng, d),
                    ln3: LayerNorm::init(d),
                    ff: FeedForward::init(rng, d, config.ff_dim),
                })
                .collect(),
            enc_ln: LayerNorm::init(d),
            dec_ln: LayerNorm::init(d),
            out: Linear::init(rng, d, config.vocab_size),
            config,
        })
    }

    pub fn zeros_like(&self) -> Model<S> {
        Model {
            config: self.config.clone(),
            embedding: Array2::zeros(self.embedding.raw_dim()),
            enc_pos: Array2::zeros(self.enc_pos.raw_dim()),
            dec_pos: Array2::zeros(self.dec_pos.raw_dim()),
            enc_layers: self
                .enc_layers
                .iter()
                .map(|l| EncoderLayer {
                    ln1: l.ln1.zeros_like(),
                    attn: l.attn.zeros_like(),
                    ln2: l.ln2.zeros_like(),
                    ff: l.ff.zeros_like(),
                })
                .collect(),
            dec_layers: self
                .dec_layers
                .iter()
                .map(|l| DecoderLayer {
                    ln1: l.ln1.zeros_like(),
                    self_attn: l.self_attn.zeros_like(),
                    ln2: l.ln2.zeros_like(),
                    cross_attn: l.cross_attn.zeros_like(),
                    ln3: l.ln3.zeros_like(),
                    ff: l.ff.zeros_like(),
                })
                .collect(),
            enc_ln: self.enc_ln.zeros_like(),
            dec_ln: self.dec_ln.zeros_like(),
            out: self.out.zeros_like(),
        }
    }

    /// Every parameter tensor in a fixed order (mirrors across model, grads,
    /// and optimizer moments).
    pub fn params_mut(&mut self) -> Vec<&mut Array2<S>> {
        let mut list: Vec<&mut Array2<S>> = vec![
            &mut self.embedding,
            &mut self.enc_pos,
            &mut self.dec_pos,
        ];
        fn push_linear<'a, S>(list: &mut Vec<&'a mut Array2<S>>, l: &'a mut Linear<S>) {
            list.push(&mut l.w);
            list.push(&mut l.b);
        }
        fn push_ln<'a, S>(list: &mut Vec<&'a mut Array2<S>>, l: &'a mut LayerNorm<S>) {
            list.push(&mut l.gamma);
            list.push(&mut l.beta);
        }
        fn push_attn<'a, S>(list: &mut Vec<&'a mut Array2<S>>, a: &'a mut Attention<S>) {
            push_linear(list, &mut a.wq);
            push_linear(list, &mut a.wk);
            push_linear(list, &mut a.wv);
            push_linear(list, &mut a.wo);
        }
        for l in &mut self.enc_layers {
            push_ln(&mut list, &mut l.ln1);
            push_attn(&mut list, &mut l.attn);
            push_ln(&mut list, &mut l.ln2);
            push_linear(&mut list, &mut l.ff.w1);
            push_linear(&mut list, &mut l.ff.w2);
        }
        for l in &mut self.dec_layers {
            push_ln(&mut list, &mut l.ln1);
            push_attn(&mut list, &mut l.self_attn);
            push_ln(&mut list, &mut l.ln2);
            push_attn(&mut list, &mut l.cross_attn);
            push_ln(&mut list, &mut l.ln3);
            push_linear(&mut list, &mut l.ff.w1);
            push_linear(&mut list, &mut l.ff.w2);
        }
        push_ln(&mut list, &mut self.enc_ln);
        push_ln(&mut list, &mut self.dec_ln);
        push_linear(&mut list, &mut self.out);
        list
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.len()).sum()
    }

    fn embed(&self, ids: &[u32], pos: &Array2<S>) -> Result<Array2<S>, ModelError> {
        if ids.is_empty() {
            return Err(ModelError::Empty);
        }
        if ids.len() > self.config.max_positions {
            return Err(ModelError::TooLong {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        let mut x = Array2::zeros((ids.len(), self.config.dim));
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
            let row = &self.embedding.row(id as usize) + &pos.row(i);
            x.row_mut(i).assign(&row);
        }
        Ok(x)
    }

    pub fn encode(&self, ids: &[u32]) -> Result<EncodeTrace<S>, ModelError> {
        let mut x = self.embed(ids, &self.enc_pos)?;
        let mut layers = Vec::with_capacity(self.enc_layers.len());
        for layer in &self.enc_layers {
            let (normed, ln1) = layer.ln1.forward(&x);
            let (attn_out, attn) = layer.attn.forward(&normed, &normed, self.config.heads, false);
            x += &attn_out;
            let (normed2, ln2) = layer.ln2.forward(&x);
            let (ff_out, ff) = layer.ff.forward(&normed2);
            x += &ff_out;
            layers.push(EncoderLayerTrace { ln1, attn, ln2, ff });
        }
        let (memory, final_ln) = self.enc_ln.forward(&x);
        Ok(EncodeTrace {
            ids: ids.to_vec(),
            layers,
            final_ln,
            memory,
        })
    }

    /// Runs the decoder over `ids` (teacher-forced prefix) against the
    /// encoded memory, producing next-token logits at every position.
    pub fn decode(&self, enc: &EncodeTrace<S>, ids: &[u32]) -> Result<DecodeTrace<S>, ModelError> {
        let mut x = self.embed(ids, &self.dec_pos)?;
        let mut layers = Vec::with_capacity(self.dec_layers.len());
        for layer in &self.dec_layers {
            let (normed, ln1) = layer.ln1.forward(&x);
            let (sa_out, self_attn) =
                layer
                    .self_attn
                    .forward(&normed, &normed, self.config.heads, true);
            x += &sa_out;
            let (normed2, ln2) = layer.ln2.forward(&x);
            let (ca_out, cross_attn) =
                layer
                    .cross_attn
                    .forward(&normed2, &enc.memory, self.config.heads, false);
            x += &ca_out;
            let (normed3, ln3) = layer.ln3.forward(&x);
            let (ff_out, ff) = layer.ff.forward(&normed3);
            x += &ff_out;
            layers.push(DecoderLayerTrace {
                ln1,
                self_attn,
                ln2,
                cross_attn,
                ln3,
                ff,
            });
        }
        let (hidden, final_ln) = self.dec_ln.forward(&x);
        let logits = self.out.forward(&hidden);
        Ok(DecodeTrace {
            ids: ids.to_vec(),
            layers,
            final_ln,
            hidden,
            logits,
        })
    }

    /// Cross-entropy over the decoder positions whose target is not
    /// `pad_id`; returns the mean loss in f64. With `smoothing` > 0 the
    /// target distribution is (1 - eps) on the label plus eps spread
    /// uniformly over the vocabulary.
    pub fn loss(&self, dec: &DecodeTrace<S>, targets: &[u32], pad_id: u32, smoothing: f64) -> f64 {
        assert_eq!(dec.logits.nrows(), targets.len());
        let (loss, _) = self.loss_and_dlogits(dec, targets, pad_id, smoothing);
        loss
    }

    fn loss_and_dlogits(
        &self,
        dec: &DecodeTrace<S>,
        targets: &[u32],
        pad_id: u32,
        smoothing: f64,
    ) -> (f64, Array2<S>) {
        let active: usize = targets.iter().filter(|&&t| t != pad_id).count();
        assert!(active > 0, "all-pad target");
        let inv = S::of_f64(1.0 / active as f64);
        let vocab = dec.logits.ncols();
        let eps = smoothing;
        let off = eps / vocab as f64;
        let off_s = S::of_f64(off) * inv;
        let keep = S::of_f64(1.0 - eps) * inv;
        let mut dlogits = Array2::zeros(dec.logits.raw_dim());
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t == pad_id {
                continue;
            }
            let row = dec.logits.row(i);
            let max = row.iter().cloned().fold(S::of_f64(f64::NEG_INFINITY), S::max);
            let sum_exp = row.iter().map(|&x| (x - max).exp()).fold(S::zero(), |a, b| a + b);
            let log_z = max + sum_exp.ln();
            total += (1.0 - eps) * (log_z - row[t as usize]).to_f64_();
            for j in 0..vocab {
                let p = (row[j] - log_z).exp();
                dlogits[[i, j]] = p * inv - off_s;
                if eps > 0.0 {
                    total += off * (log_z - row[j]).to_f64_();
                }
            }
            dlogits[[i, t as usize]] -= keep;
        }
        (total / active as f64, dlogits)
    }

    /// Full backward pass; accumulates into `grads` and returns the loss.
    pub fn backward(
        &self,
        grads: &mut Model<S>,
        enc: &EncodeTrace<S>,
        dec: &DecodeTrace<S>,
        targets: &[u32],
        pad_id: u32,
        smoothing: f64,
    ) -> f64 {
        let (loss, dlogits) = self.loss_and_dlogits(dec, targets, pad_id, smoothing);
        let d_hidden = self.out.backward(&mut grads.out, &dec.hidden, &dlogits);
        let mut dx = self.dec_ln.backward(&mut grads.dec_ln, &dec.final_ln, &d_hidden);
        let mut d_memory: Array2<S> = Array2::zeros(enc.memory.raw_dim());
        for (layer, (grad, trace)) in self
            .dec_layers
            .iter()
            .zip(grads.dec_layers.iter_mut().zip(dec.layers.iter()))
            .rev()
        {
            let d_ff_out = dx.clone();
            let d_normed3 = layer.ff.backward(&mut grad.ff, &trace.ff, &d_ff_out);
            dx += &layer.ln3.backward(&mut grad.ln3, &trace.ln3, &d_normed3);
            let d_ca_out = dx.clone();
            let (d_normed2, d_mem) = layer.cross_attn.backward(
                &mut grad.cross_attn,
                &trace.cross_attn,
                self.config.heads,
                &d_ca_out,
            );
            d_memory += &d_mem;
            dx += &layer.ln2.backward(&mut grad.ln2, &trace.ln2, &d_normed2);
            let d_sa_out = dx.clone();
            let (d_normed_q, d_normed_kv) = layer.self_attn.backward(
                &mut grad.self_attn,
                &trace.self_attn,
                self.config.heads,
                &d_sa_out,
            );
            let d_normed = d_normed_q + d_normed_kv;
            dx += &layer.ln1.backward(&mut grad.ln1, &trace.ln1, &d_normed);
        }
        for (i, &id) in dec.ids.iter().enumerate() {
            let d_row = dx.row(i);
            let mut emb_row = grads.embedding.row_mut(id as usize);
            emb_row += &d_row;
            let mut pos_row = grads.dec_pos.row_mut(i);
            pos_row += &d_row;
        }

        let mut dx = self.enc_ln.backward(&mut grads.enc_ln, &enc.final_ln, &d_memory);
        for (layer, (grad, trace)) in self
            .enc_layers
            .iter()
            .zip(grads.enc_layers.iter_mut().zip(enc.layers.iter()))
            .rev()
        {
            let d_ff_out = dx.clone();
            let d_normed2 = layer.ff.backward(&mut grad.ff, &trace.ff, &d_ff_out);
            dx += &layer.ln2.backward(&mut grad.ln2, &trace.ln2, &d_normed2);
            let d_attn_out = dx.clone();
            let (d_q, d_kv) = layer.attn.backward(
                &mut grad.attn,
                &trace.attn,
                self.config.heads,
                &d_attn_out,
            );
            let d_normed = d_q + d_kv;
            dx += &layer.ln1.backward(&mut grad.ln1, &trace.ln1, &d_normed);
        }
        for (i, &id) in enc.ids.iter().enumerate() {
            let d_row = dx.row(i);
            let mut emb_row = grads.embedding.row_mut(id as usize);
            emb_row += &d_row;
            let mut pos_row = grads.enc_pos.row_mut(i);
            pos_row += &d_row;
        }
        loss
    }

    /// Convenience wrapper: forward + backward on one example.
    pub fn example_loss_and_grad(
        &self,
        grads: &mut Model<S>,
        src: &[u32],
        dec_input: &[u32],
        targets: &[u32],
        pad_id: u32,
        smoothing: f64,
    ) -> Result<f64, ModelError> {
        let enc = self.encode(src)?;
        let dec = self.decode(&enc, dec_input)?;
        Ok(self.backward(grads, &enc, &dec, targets, pad_id, smoothing))
    }
}
