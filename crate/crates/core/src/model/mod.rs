//! Windowed-attention encoder-decoder with a sentence-level turn-switch
//! head, trained from scratch.
//!
//! The encoder applies pre-layer-norm transformer blocks whose self-attention
//! is restricted to a fixed window around each position; the decoder uses
//! causal self-attention plus full cross-attention into the encoder states.
//! Input and output embeddings are tied, positions are learned, and all
//! parameters live in an insertion-ordered name -> tensor map so checkpoints
//! are byte-stable.

mod attention;
mod checkpoint;
mod layers;
mod transformer;

pub use attention::{windowed_attention, Visibility};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub(crate) use transformer::mlm_backward;
pub use transformer::{
    decode_with_cache, decoder_backward, encode_with_cache, encoder_backward, mlm_logits,
    DecoderCache, EncoderCache, EncoderOutput,
};

use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Ix1, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::Scalar;

/// Epsilon inside every layer-norm variance denominator.
pub const LN_EPS: f64 = 1e-5;
/// `sqrt(2/pi)` coefficient of the tanh GELU approximation.
pub const GELU_C: f64 = 0.7978845608028654;
/// Cubic coefficient of the tanh GELU approximation.
pub const GELU_A: f64 = 0.044715;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("config mismatch on field {field}: expected {expected}, found {found}")]
    ConfigMismatch {
        field: &'static str,
        expected: String,
        found: String,
    },
    #[error("{role} sequence of length {len} exceeds the position table ({max})")]
    SequenceTooLong {
        role: &'static str,
        len: usize,
        max: usize,
    },
    #[error("input has no content tokens")]
    EmptyInput,
    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("position {pos} is outside a sequence of length {len}")]
    PositionOutOfRange { pos: usize, len: usize },
    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("attention window must be odd and >= 1, got {0}")]
    BadWindow(usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters. `window` is the encoder self-attention
/// span (odd, centered); `dropout_rate` exists for config compatibility and
/// must be zero — training is fully deterministic.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub window: usize,
    pub max_positions_enc: usize,
    pub max_positions_dec: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::BadConfig(msg));
        if self.vocab_size <= crate::tokenizer::NUM_SPECIALS as usize {
            return fail(format!("vocab_size {} leaves no ordinary tokens", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return fail("layer counts must be >= 1".into());
        }
        if self.d_ff == 0 {
            return fail("d_ff must be >= 1".into());
        }
        if self.window < 3 || self.window.is_multiple_of(2) {
            return fail(format!("window must be odd and >= 3, got {}", self.window));
        }
        if self.max_positions_enc == 0 || self.max_positions_dec == 0 {
            return fail("position tables must be non-empty".into());
        }
        if self.dropout_rate != 0.0 {
            return fail(format!(
                "dropout_rate must be 0 (deterministic training), got {}",
                self.dropout_rate
            ));
        }
        Ok(())
    }

    /// Head dimension.
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Window radius on each side of a position.
    pub fn window_radius(&self) -> usize {
        (self.window - 1) / 2
    }

    /// Errors with the first differing field when two configs disagree.
    pub fn assert_compatible(&self, other: &ModelConfig) -> Result<(), ModelError> {
        macro_rules! check {
            ($field:ident) => {
                if self.$field != other.$field {
                    return Err(ModelError::ConfigMismatch {
                        field: stringify!($field),
                        expected: self.$field.to_string(),
                        found: other.$field.to_string(),
                    });
                }
            };
        }
        check!(vocab_size);
        check!(d_model);
        check!(n_heads);
        check!(n_enc_layers);
        check!(n_dec_layers);
        check!(d_ff);
        check!(window);
        check!(max_positions_enc);
        check!(max_positions_dec);
        check!(dropout_rate);
        Ok(())
    }

    /// Canonical tensor names and shapes, in checkpoint/manifest order.
    pub fn tensor_shapes(&self) -> IndexMap<String, Vec<usize>> {
        let d = self.d_model;
        let mut shapes = IndexMap::new();
        let mut add = |name: String, shape: Vec<usize>| {
            shapes.insert(name, shape);
        };
        add("embed.tok".into(), vec![self.vocab_size, d]);
        add("embed.pos_enc".into(), vec![self.max_positions_enc, d]);
        add("embed.pos_dec".into(), vec![self.max_positions_dec, d]);
        let add_attn = |prefix: String, shapes: &mut IndexMap<String, Vec<usize>>| {
            for m in ["wq", "wk", "wv", "wo"] {
                shapes.insert(format!("{prefix}.{m}"), vec![d, d]);
            }
            // No key bias: it is inert under softmax (see `mha_forward`).
            for b in ["bq", "bv", "bo"] {
                shapes.insert(format!("{prefix}.{b}"), vec![d]);
            }
        };
        let add_ln = |prefix: String, shapes: &mut IndexMap<String, Vec<usize>>| {
            shapes.insert(format!("{prefix}.g"), vec![d]);
            shapes.insert(format!("{prefix}.b"), vec![d]);
        };
        let add_ffn = |prefix: String, shapes: &mut IndexMap<String, Vec<usize>>| {
            shapes.insert(format!("{prefix}.w1"), vec![d, self.d_ff]);
            shapes.insert(format!("{prefix}.b1"), vec![self.d_ff]);
            shapes.insert(format!("{prefix}.w2"), vec![self.d_ff, d]);
            shapes.insert(format!("{prefix}.b2"), vec![d]);
        };
        for i in 0..self.n_enc_layers {
            add_ln(format!("enc.{i}.ln1"), &mut shapes);
            add_attn(format!("enc.{i}.attn"), &mut shapes);
            add_ln(format!("enc.{i}.ln2"), &mut shapes);
            add_ffn(format!("enc.{i}.ffn"), &mut shapes);
        }
        add_ln("enc.final_ln".into(), &mut shapes);
        for i in 0..self.n_dec_layers {
            add_ln(format!("dec.{i}.ln1"), &mut shapes);
            add_attn(format!("dec.{i}.self"), &mut shapes);
            add_ln(format!("dec.{i}.ln2"), &mut shapes);
            add_attn(format!("dec.{i}.cross"), &mut shapes);
            add_ln(format!("dec.{i}.ln3"), &mut shapes);
            add_ffn(format!("dec.{i}.ffn"), &mut shapes);
        }
        add_ln("dec.final_ln".into(), &mut shapes);
        shapes.insert("turn.w".into(), vec![d]);
        shapes.insert("turn.b".into(), vec![1]);
        shapes
    }
}

/// All learnable tensors of a model, keyed by name in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F: Scalar> {
    config: ModelConfig,
    tensors: IndexMap<String, ArrayD<F>>,
}

impl<F: Scalar> Parameters<F> {
    /// Xavier-uniform initialization (`+-sqrt(6/(fan_in+fan_out))`) for
    /// matrices and embeddings, zeros for biases, ones for layer-norm gains.
    /// All draws happen in `f64` before conversion, so every scalar type
    /// sees the same underlying values.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = IndexMap::new();
        for (name, shape) in config.tensor_shapes() {
            let is_gain = name.ends_with(".g");
            let is_bias = !is_gain && shape.len() == 1 && !name.ends_with("turn.w");
            let tensor: ArrayD<F> = if is_gain {
                ArrayD::from_elem(shape.clone(), F::one())
            } else if is_bias {
                ArrayD::zeros(shape.clone())
            } else {
                let (fan_in, fan_out) = if shape.len() == 2 {
                    (shape[0], shape[1])
                } else {
                    (shape[0], 1)
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                ArrayD::from_shape_simple_fn(shape.clone(), || {
                    F::from_f64_c(rng.random_range(-bound..bound))
                })
            };
            tensors.insert(name, tensor);
        }
        Ok(Self { config, tensors })
    }

    /// Assembles parameters from pre-existing tensors, verifying that the
    /// name set and every shape match the config exactly.
    pub fn from_parts(
        config: ModelConfig,
        mut tensors: IndexMap<String, ArrayD<F>>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut ordered = IndexMap::new();
        for (name, shape) in config.tensor_shapes() {
            let tensor = tensors
                .shift_remove(&name)
                .ok_or_else(|| ModelError::UnknownTensor(format!("missing {name}")))?;
            if tensor.shape() != shape.as_slice() {
                return Err(ModelError::ShapeMismatch {
                    name,
                    expected: shape,
                    found: tensor.shape().to_vec(),
                });
            }
            ordered.insert(name, tensor);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(ModelError::UnknownTensor(extra.clone()));
        }
        Ok(Self {
            config,
            tensors: ordered,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &IndexMap<String, ArrayD<F>> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<F>, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::UnknownTensor(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<F>, ModelError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::UnknownTensor(name.into()))
    }

    /// Total scalar count across all tensors.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub(crate) fn view2(&self, name: &str) -> ArrayView2<'_, F> {
        self.tensors[name]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("tensor registered as 2-d")
    }

    pub(crate) fn view1(&self, name: &str) -> ArrayView1<'_, F> {
        self.tensors[name]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("tensor registered as 1-d")
    }

    /// Grows the learned position tables by cyclic tiling: new row `i`
    /// copies old row `i % old_len`. Lengths may only grow; equal lengths
    /// are a no-op.
    pub fn extend_positions(
        &mut self,
        new_max_enc: usize,
        new_max_dec: usize,
    ) -> Result<(), ModelError> {
        if new_max_enc < self.config.max_positions_enc
            || new_max_dec < self.config.max_positions_dec
        {
            return Err(ModelError::BadConfig(format!(
                "position tables cannot shrink: {} -> {new_max_enc}, {} -> {new_max_dec}",
                self.config.max_positions_enc, self.config.max_positions_dec
            )));
        }
        for (name, new_len) in [
            ("embed.pos_enc", new_max_enc),
            ("embed.pos_dec", new_max_dec),
        ] {
            let old = self.view2(name).to_owned();
            let tiled = Array2::from_shape_fn((new_len, self.config.d_model), |(i, j)| {
                old[(i % old.nrows(), j)]
            });
            self.tensors[name] = tiled.into_dyn();
        }
        self.config.max_positions_enc = new_max_enc;
        self.config.max_positions_dec = new_max_dec;
        Ok(())
    }
}

/// Sentence-level turn-switch scores: `sigmoid(w . h_start + b)` read at
/// each sentence's `BOS` position of the final encoder states.
pub fn turn_head<F: Scalar>(
    params: &Parameters<F>,
    hidden: &Array2<F>,
    sentence_starts: &[usize],
) -> Result<Vec<F>, ModelError> {
    let w = params.view1("turn.w");
    let b = params.view1("turn.b")[0];
    sentence_starts
        .iter()
        .map(|&s| {
            if s >= hidden.nrows() {
                return Err(ModelError::PositionOutOfRange {
                    pos: s,
                    len: hidden.nrows(),
                });
            }
            let z = hidden.row(s).dot(&w) + b;
            Ok(F::one() / (F::one() + (-z).exp()))
        })
        .collect()
}

/// Same-shaped gradient accumulator for a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F: Scalar> {
    tensors: IndexMap<String, ArrayD<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros_like(params: &Parameters<F>) -> Self {
        Self {
            tensors: params
                .tensors
                .iter()
                .map(|(name, t)| (name.clone(), ArrayD::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn tensors(&self) -> &IndexMap<String, ArrayD<F>> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<F>, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::UnknownTensor(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<F>, ModelError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::UnknownTensor(name.into()))
    }

    /// Replaces one tensor, keeping its registered shape.
    pub fn set(&mut self, name: &str, tensor: ArrayD<F>) -> Result<(), ModelError> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::UnknownTensor(name.into()))?;
        if slot.shape() != tensor.shape() {
            return Err(ModelError::ShapeMismatch {
                name: name.into(),
                expected: slot.shape().to_vec(),
                found: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
        Ok(())
    }

    pub(crate) fn add2(&mut self, name: &str, delta: &Array2<F>) {
        let mut view = self.tensors[name]
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("tensor registered as 2-d");
        view += delta;
    }

    pub(crate) fn add1(&mut self, name: &str, delta: &Array1<F>) {
        let mut view = self.tensors[name]
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("tensor registered as 1-d");
        view += delta;
    }

    pub(crate) fn add_row(&mut self, name: &str, row: usize, delta: ArrayView1<'_, F>) {
        let mut view = self.tensors[name]
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("tensor registered as 2-d");
        let mut target = view.row_mut(row);
        target += &delta;
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for (name, tensor) in &mut self.tensors {
            *tensor += &other.tensors[name];
        }
    }

    /// Multiplies every gradient by `factor` (e.g. `1/batch_size`).
    pub fn scale(&mut self, factor: F) {
        for tensor in self.tensors.values_mut() {
            tensor.mapv_inplace(|v| v * factor);
        }
    }

    /// Largest absolute entry, useful for finiteness and explosion checks.
    pub fn max_abs(&self) -> F {
        let mut best = F::zero();
        for tensor in self.tensors.values() {
            for &v in tensor.iter() {
                if v.abs() > best {
                    best = v.abs();
                }
            }
        }
        best
    }

    /// True when every component is finite.
    pub fn all_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 64,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            window: 5,
            max_positions_enc: 32,
            max_positions_dec: 16,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        let config = ModelConfig {
            vocab_size: 1000,
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            window: 9,
            max_positions_enc: 128,
            max_positions_dec: 128,
            dropout_rate: 0.0,
        };
        let params = Parameters::<f64>::init(config, 0).unwrap();
        // embeddings 64000 + 8192 + 8192; encoder 2*33408 + 128;
        // decoder 2*50112 + 128; turn head 65.
        assert_eq!(params.param_count(), 247_745);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Parameters::<f64>::init(tiny_config(), 7).unwrap();
        let b = Parameters::<f64>::init(tiny_config(), 7).unwrap();
        let c = Parameters::<f64>::init(tiny_config(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_styles_by_tensor_kind() {
        let params = Parameters::<f64>::init(tiny_config(), 1).unwrap();
        assert!(params.get("enc.0.ln1.g").unwrap().iter().all(|&v| v == 1.0));
        assert!(params.get("enc.0.attn.bq").unwrap().iter().all(|&v| v == 0.0));
        assert!(params.get("turn.b").unwrap().iter().all(|&v| v == 0.0));
        // Weight matrices are non-constant and bounded by the Xavier limit.
        let w = params.get("enc.0.attn.wq").unwrap();
        let bound = (6.0 / 16.0_f64).sqrt();
        assert!(w.iter().any(|&v| v != 0.0));
        assert!(w.iter().all(|&v| v.abs() < bound));
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut c = tiny_config();
        c.window = 4;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.d_model = 10; // not a multiple of n_heads = 2? it is; use heads 3
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.dropout_rate = 0.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_mismatch_names_field() {
        let a = tiny_config();
        let mut b = tiny_config();
        b.d_ff = 32;
        match a.assert_compatible(&b) {
            Err(ModelError::ConfigMismatch { field, .. }) => assert_eq!(field, "d_ff"),
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn from_parts_validates_names_and_shapes() {
        let params = Parameters::<f64>::init(tiny_config(), 3).unwrap();
        let mut tensors = params.tensors().clone();
        // Round trip works.
        assert!(Parameters::from_parts(tiny_config(), tensors.clone()).is_ok());
        // Shape corruption is caught.
        tensors["turn.w"] = ArrayD::zeros(vec![4]);
        assert!(matches!(
            Parameters::from_parts(tiny_config(), tensors.clone()),
            Err(ModelError::ShapeMismatch { .. })
        ));
        // Missing tensors are caught.
        let mut tensors = params.tensors().clone();
        tensors.shift_remove("turn.w");
        assert!(Parameters::from_parts(tiny_config(), tensors).is_err());
    }

    #[test]
    fn extend_positions_tiles_cyclically() {
        let mut params = Parameters::<f64>::init(tiny_config(), 5).unwrap();
        let old = params.view2("embed.pos_enc").to_owned();
        params.extend_positions(80, 16).unwrap();
        assert_eq!(params.config().max_positions_enc, 80);
        let new = params.view2("embed.pos_enc");
        for i in 0..80 {
            for j in 0..8 {
                assert_eq!(new[(i, j)], old[(i % 32, j)]);
            }
        }
        // Equal size is identity; shrinking errors.
        let before = params.clone();
        params.extend_positions(80, 16).unwrap();
        assert_eq!(params, before);
        assert!(params.extend_positions(40, 16).is_err());
    }

    #[test]
    fn turn_head_scores_are_probabilities() {
        let params = Parameters::<f64>::init(tiny_config(), 2).unwrap();
        let hidden = Array2::from_shape_fn((6, 8), |(i, j)| ((i * 8 + j) as f64).sin());
        let scores = turn_head(&params, &hidden, &[0, 3, 5]).unwrap();
        assert_eq!(scores.len(), 3);
        assert!(scores.iter().all(|&s| s > 0.0 && s < 1.0));
        assert!(matches!(
            turn_head(&params, &hidden, &[6]),
            Err(ModelError::PositionOutOfRange { .. })
        ));
    }
}
