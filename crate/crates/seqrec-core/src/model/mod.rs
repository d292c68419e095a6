//! Sequence-to-sequence transformer: architecture, training, decoding.

pub mod decode;
pub mod nn;
pub mod train;

pub use decode::{beam_decode, embedding_similarity, greedy_decode, Hypothesis};
pub use nn::{Model, ModelConfig, ModelError, Scalar, Task};
pub use train::{
    init_model, lr_at, train_stream, Example, ExampleBuilder, TrainConfig, TrainError, TrainState,
};
