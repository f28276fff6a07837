//! Small end-to-end training grid that isolates each objective component.
//!
//! Five arms share one tiny model shape and training budget and differ only
//! in corpus style (speaker tags present or not), masking objective (whole
//! sentences vs. individual words), and which auxiliary losses join the
//! generation loss. The grid exists to show every pathway trains to finite
//! losses and to give a one-glance comparison table.

use thiserror::Error;

use crate::corpus::{synth_corpus, CorpusError, LengthProfile};
use crate::model::{ModelConfig, ModelError, Parameters};
use crate::objectives::{
    annotate_candidates, map_candidates_to_masked, mask_sentences, mask_words,
    mask_words_on_example, pack, ObjectiveError, PretrainExample, WordMaskMode,
};
use crate::tokenizer::{build_vocab, TokenizerError};
use crate::training::{run_stage, Schedule, Stage, TrainConfig, TrainError};
use crate::mix_seed;

/// Dialogues (and therefore packed instances) per arm.
const ARM_DIALOGUES: usize = 40;
/// Encoder packing cap per instance.
const ARM_CAP: usize = 96;
/// Vocabulary cap per arm.
const ARM_VOCAB: usize = 256;
/// Sentence-mask ratio used by the sentence-masking arms.
const SENTENCE_RATIO: f64 = 0.18;
/// Word-mask ratio used by the word-masking arm and the overlay arm.
const WORD_RATIO: f64 = 0.15;

#[derive(Debug, Error)]
pub enum AblationError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// One arm of the grid: what data it sees and which losses it optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArmSpec {
    pub name: &'static str,
    /// Corpus carries real speaker tags (otherwise every speaker is UNK).
    pub turn_info: bool,
    /// Mask whole sentences; otherwise mask individual words and generate
    /// them from the decoder.
    pub sentence_mask: bool,
    /// Add the turn-switch loss to the objective.
    pub turn_loss: bool,
    /// Overlay word masks and add the encoder-side word-recovery loss.
    pub mlm: bool,
}

/// The five arms, ordered from plainest to fullest objective.
pub const ABLATION_ARMS: [ArmSpec; 5] = [
    ArmSpec {
        name: "word_mask_plain",
        turn_info: false,
        sentence_mask: false,
        turn_loss: false,
        mlm: false,
    },
    ArmSpec {
        name: "sentence_mask_plain",
        turn_info: false,
        sentence_mask: true,
        turn_loss: false,
        mlm: false,
    },
    ArmSpec {
        name: "sentence_mask_speakers",
        turn_info: true,
        sentence_mask: true,
        turn_loss: false,
        mlm: false,
    },
    ArmSpec {
        name: "sentence_mask_turn_loss",
        turn_info: true,
        sentence_mask: true,
        turn_loss: true,
        mlm: false,
    },
    ArmSpec {
        name: "sentence_mask_turn_mlm",
        turn_info: true,
        sentence_mask: true,
        turn_loss: true,
        mlm: true,
    },
];

/// Final training losses of one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub name: &'static str,
    pub steps: u64,
    pub l_gen: f64,
    pub l_turn: Option<f64>,
    pub l_mlm: Option<f64>,
}

impl ArmResult {
    /// True when every reported loss is a finite number.
    pub fn all_finite(&self) -> bool {
        self.l_gen.is_finite()
            && self.l_turn.is_none_or(f64::is_finite)
            && self.l_mlm.is_none_or(f64::is_finite)
    }
}

/// Results of the full grid, in [`ABLATION_ARMS`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<ArmResult>,
}

impl AblationReport {
    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(ArmResult::all_finite)
    }

    /// Fixed-width text table, one row per arm; absent losses print as `-`.
    pub fn render_table(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "-".to_string(),
        };
        let mut out = format!(
            "{:<26} {:>6} {:>10} {:>10} {:>10}\n",
            "arm", "steps", "l_gen", "l_turn", "l_mlm"
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{:<26} {:>6} {:>10} {:>10} {:>10}\n",
                row.name,
                row.steps,
                fmt(Some(row.l_gen)),
                fmt(row.l_turn),
                fmt(row.l_mlm),
            ));
        }
        out
    }
}

fn arm_examples(
    arm: &ArmSpec,
    seed: u64,
    arm_index: u64,
) -> Result<(Vec<PretrainExample>, usize), AblationError> {
    let profile = LengthProfile {
        min_utterances: 3,
        max_utterances: 6,
        min_words: 2,
        max_words: 6,
    };
    let corpus = synth_corpus(
        ARM_DIALOGUES,
        arm.turn_info,
        profile,
        4,
        mix_seed(seed, arm_index),
    )?;
    let vocab = build_vocab(&corpus, ARM_VOCAB)?;
    let mut examples = Vec::with_capacity(corpus.len());
    for (i, dialogue) in corpus.iter().enumerate() {
        let instance = pack(std::slice::from_ref(dialogue), ARM_CAP, &vocab)?.remove(0);
        let mask_seed = mix_seed(seed, 1_000 * (arm_index + 1) + i as u64);
        let example = if arm.sentence_mask {
            let mut example = mask_sentences(&instance, SENTENCE_RATIO, mask_seed)?;
            if arm.mlm {
                let candidates = annotate_candidates(&instance, &vocab);
                let mapped = map_candidates_to_masked(
                    &instance,
                    &example.masked_sentence_indices,
                    &candidates,
                );
                example = mask_words_on_example(
                    &example,
                    WORD_RATIO,
                    &mapped,
                    mix_seed(seed, 2_000 * (arm_index + 1) + i as u64),
                )?;
            }
            example
        } else {
            let candidates = annotate_candidates(&instance, &vocab);
            mask_words(
                &instance,
                WORD_RATIO,
                &candidates,
                mask_seed,
                WordMaskMode::Generation,
            )?
        };
        examples.push(example);
    }
    Ok((examples, vocab.size()))
}

/// Trains all five arms for `epochs` epochs at a fixed tiny scale and
/// reports each arm's final-step losses.
pub fn run_ablation_grid(seed: u64, epochs: usize) -> Result<AblationReport, AblationError> {
    let mut rows = Vec::with_capacity(ABLATION_ARMS.len());
    for (arm_index, arm) in ABLATION_ARMS.iter().enumerate() {
        let (examples, vocab_size) = arm_examples(arm, seed, arm_index as u64)?;
        let model_cfg = ModelConfig {
            vocab_size,
            d_model: 32,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 64,
            window: 5,
            max_positions_enc: ARM_CAP + 32,
            max_positions_dec: ARM_CAP + 32,
            dropout_rate: 0.0,
        };
        let params = Parameters::<f64>::init(model_cfg, mix_seed(seed, 500 + arm_index as u64))?;
        let train_cfg = TrainConfig {
            stage: if arm.turn_info { Stage::S2 } else { Stage::S1 },
            max_input_tokens: ARM_CAP,
            max_target_tokens: ARM_CAP + 32,
            mask_ratio: if arm.sentence_mask { SENTENCE_RATIO } else { WORD_RATIO },
            beta: 1.0,
            beta_adaptive: false,
            lr_max: 3e-3,
            warmup_fraction: 0.1,
            schedule: Schedule::LinearDecay,
            epochs,
            batch_size: 8,
            seed: mix_seed(seed, 600 + arm_index as u64),
            enable_turn_loss: arm.turn_loss,
            enable_mlm: arm.mlm,
        };
        let outcome = run_stage(params, &examples, &train_cfg, None, None)?;
        let last = outcome
            .steps
            .last()
            .expect("a non-empty dataset always yields at least one step");
        rows.push(ArmResult {
            name: arm.name,
            steps: outcome.state.step,
            l_gen: last.l_gen,
            l_turn: last.l_turn,
            l_mlm: last.l_mlm,
        });
    }
    Ok(AblationReport { rows })
}
