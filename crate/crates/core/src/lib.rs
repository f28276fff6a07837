//! Core library for speaker-aware dialogue summarization pre-training:
//! corpus handling, tokenization, masking objectives, a windowed-attention
//! encoder-decoder trained from scratch, and summarization/turn metrics.

pub mod ablation;
pub mod corpus;
pub mod evaluation;
pub mod model;
pub mod objectives;
pub mod scalar;
pub mod tokenizer;
pub mod training;

pub use scalar::Scalar;

/// Concrete double-precision aliases for the common case.
pub type Parameters64 = model::Parameters<f64>;
pub type Gradients64 = model::Gradients<f64>;
pub type EncoderOutput64 = model::EncoderOutput<f64>;
pub type TrainState64 = training::TrainState<f64>;

/// Derives a per-item RNG seed from a global seed and a stream index, so
/// every stochastic step is a pure function of `(seed, index)`.
///
/// Mixing follows the SplitMix64 finalizer, which decorrelates consecutive
/// indices into statistically independent streams.
pub fn mix_seed(global_seed: u64, index: u64) -> u64 {
    let mut z = global_seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
