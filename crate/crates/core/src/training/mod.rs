//! Deterministic training: Adam with warmup schedules, per-epoch shuffling
//! derived purely from `(seed, epoch)`, optional adaptive loss balancing,
//! and bit-identical resume from a saved state.

mod gradcheck;
mod losses;

pub use gradcheck::{finite_difference_check, GradCheckReport, FD_REL_TOL, FD_STEP};
pub use losses::{example_losses, generation_loss, turn_loss, LossFlags, LossParts, BCE_EPS};

use indexmap::IndexMap;
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mix_seed;
use crate::model::{Gradients, ModelError, Parameters};
use crate::objectives::PretrainExample;
use crate::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Clamp range for the adaptively balanced turn-loss weight.
pub const BETA_MIN: f64 = 0.01;
pub const BETA_MAX: f64 = 100.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("shape mismatch: {0}")]
    Mismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("no training examples")]
    EmptyDataset,
}

/// Which corpus preparation a run trains on. Stage 1 sees no speaker/turn
/// information; stage 2 adds it (and optionally the turn loss); fine-tuning
/// trains generation only on task data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    S1,
    S2,
    Finetune,
}

/// Learning-rate decay applied after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    LinearDecay,
    CosineDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Packing cap for encoder inputs, recorded for provenance.
    pub max_input_tokens: usize,
    /// Decoder targets are truncated to this many tokens at preparation.
    pub max_target_tokens: usize,
    /// Sentence- or word-mask ratio, in `(0, 0.2]`.
    pub mask_ratio: f64,
    /// Weight of the turn loss inside the joint objective.
    pub beta: f64,
    /// Re-balance `beta` to `mean(L_gen)/mean(L_turn)` at each epoch end.
    pub beta_adaptive: bool,
    pub lr_max: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub enable_turn_loss: bool,
    pub enable_mlm: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::BadConfig(msg));
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 0.2) {
            return fail(format!("mask_ratio must lie in (0, 0.2], got {}", self.mask_ratio));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return fail(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if self.lr_max <= 0.0 || !self.lr_max.is_finite() {
            return fail(format!("lr_max must be positive, got {}", self.lr_max));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be >= 1".into());
        }
        if self.max_input_tokens == 0 || self.max_target_tokens == 0 {
            return fail("token budgets must be >= 1".into());
        }
        Ok(())
    }

    /// Loss components this stage trains: the turn head only in stage 2
    /// runs that enable it, masked-word classification likewise.
    pub fn loss_flags(&self) -> LossFlags {
        LossFlags {
            turn: self.stage == Stage::S2 && self.enable_turn_loss,
            mlm: self.stage == Stage::S2 && self.enable_mlm,
        }
    }
}

/// Learning rate at 1-based `step` of `total_steps`: linear warmup over
/// `ceil(warmup_fraction * total)` steps, then the configured decay to zero
/// (linear) or along a half cosine (cosine).
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> f64 {
    let warmup = (cfg.warmup_fraction * total_steps as f64).ceil() as u64;
    if warmup > 0 && step <= warmup {
        return cfg.lr_max * step as f64 / warmup as f64;
    }
    let rest = (total_steps - warmup) as f64;
    if rest <= 0.0 {
        return cfg.lr_max;
    }
    let progress = (step - warmup) as f64 / rest;
    match cfg.schedule {
        Schedule::LinearDecay => cfg.lr_max * (1.0 - progress),
        Schedule::CosineDecay => cfg.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
    }
}

/// Complete optimizer/loop state; saving and restoring it resumes training
/// bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<F: Scalar> {
    /// Optimizer steps taken so far.
    pub step: u64,
    pub adam_m: Gradients<F>,
    pub adam_v: Gradients<F>,
    /// Current turn-loss weight (changes only under `beta_adaptive`).
    pub beta_current: f64,
    /// Epoch accumulators feeding the adaptive beta update.
    pub acc_gen: f64,
    pub acc_turn: f64,
    pub acc_steps: u64,
    pub seed: u64,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(params: &Parameters<F>, cfg: &TrainConfig) -> Self {
        Self {
            step: 0,
            adam_m: Gradients::zeros_like(params),
            adam_v: Gradients::zeros_like(params),
            beta_current: cfg.beta,
            acc_gen: 0.0,
            acc_turn: 0.0,
            acc_steps: 0,
            seed: cfg.seed,
        }
    }

    /// Flattens the state into named extra tensors for checkpointing.
    pub fn to_extras(&self) -> IndexMap<String, ArrayD<F>> {
        let mut extras = IndexMap::new();
        for (name, tensor) in self.adam_m.tensors() {
            extras.insert(format!("adam.m.{name}"), tensor.clone());
        }
        for (name, tensor) in self.adam_v.tensors() {
            extras.insert(format!("adam.v.{name}"), tensor.clone());
        }
        let scalar = |v: f64| ArrayD::from_elem(vec![1], F::from_f64_c(v));
        extras.insert("state.beta_current".into(), scalar(self.beta_current));
        extras.insert("state.acc_gen".into(), scalar(self.acc_gen));
        extras.insert("state.acc_turn".into(), scalar(self.acc_turn));
        extras.insert("state.acc_steps".into(), scalar(self.acc_steps as f64));
        extras
    }

    /// Rebuilds a state from checkpoint extras (inverse of
    /// [`TrainState::to_extras`]); `step` and `seed` come from the manifest.
    pub fn from_extras(
        params: &Parameters<F>,
        extras: &IndexMap<String, ArrayD<F>>,
        step: u64,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let mut adam_m = Gradients::zeros_like(params);
        let mut adam_v = Gradients::zeros_like(params);
        for (store, prefix) in [(&mut adam_m, "adam.m."), (&mut adam_v, "adam.v.")] {
            for name in params.tensors().keys() {
                let tensor = extras
                    .get(&format!("{prefix}{name}"))
                    .ok_or_else(|| TrainError::Resume(format!("missing {prefix}{name}")))?;
                store.set(name, tensor.clone()).map_err(|e| {
                    TrainError::Resume(format!("optimizer tensor {prefix}{name}: {e}"))
                })?;
            }
        }
        let scalar = |name: &str| -> Result<f64, TrainError> {
            let tensor = extras
                .get(name)
                .ok_or_else(|| TrainError::Resume(format!("missing {name}")))?;
            if tensor.len() != 1 {
                return Err(TrainError::Resume(format!("{name} must hold one value")));
            }
            Ok(tensor.iter().next().expect("len checked").to_f64_c())
        };
        Ok(Self {
            step,
            adam_m,
            adam_v,
            beta_current: scalar("state.beta_current")?,
            acc_gen: scalar("state.acc_gen")?,
            acc_turn: scalar("state.acc_turn")?,
            acc_steps: scalar("state.acc_steps")? as u64,
            seed,
        })
    }
}

/// One bias-corrected Adam update; increments `state.step` and errors on
/// non-finite gradients before touching any parameter.
pub fn adam_step<F: Scalar>(
    params: &mut Parameters<F>,
    grads: &Gradients<F>,
    state: &mut TrainState<F>,
    lr: f64,
) -> Result<(), TrainError> {
    if !grads.all_finite() {
        return Err(TrainError::NonFinite("gradients".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = F::from_f64_c(ADAM_BETA1);
    let b2 = F::from_f64_c(ADAM_BETA2);
    let one = F::one();
    let eps = F::from_f64_c(ADAM_EPS);
    let corr1 = one - b1.powi(t);
    let corr2 = one - b2.powi(t);
    let lr = F::from_f64_c(lr);
    let names: Vec<String> = params.tensors().keys().cloned().collect();
    for name in names {
        let g = grads.get(&name).expect("gradients mirror parameters");
        let m = state.adam_m.get_mut(&name).expect("state mirrors parameters");
        let v = state.adam_v.get_mut(&name).expect("state mirrors parameters");
        ndarray::Zip::from(m).and(v).and(g).for_each(|m, v, &g| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
        });
        let m = state.adam_m.get(&name).expect("updated above");
        let v = state.adam_v.get(&name).expect("updated above");
        let p = params.get_mut(&name).expect("name from this map");
        ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
            let m_hat = m / corr1;
            let v_hat = v / corr2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
    Ok(())
}

/// Per-step training record (one metrics line per optimizer step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub l_gen: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_turn: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_mlm: Option<f64>,
    pub beta: f64,
}

/// Per-epoch validation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub val_l_gen: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_l_turn: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_next: Option<f64>,
}

/// Everything a finished (or early-stopped) stage hands back.
pub struct StageOutcome<F: Scalar> {
    pub params: Parameters<F>,
    pub state: TrainState<F>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Trains `params` on `examples` for `cfg.epochs` epochs.
///
/// The last `len/100` examples are held out for per-epoch validation. Data
/// order reshuffles every epoch from `(seed, epoch)` alone, so a run
/// resumed from `resume` (saved at any step boundary) continues
/// bit-identically to the uninterrupted run. `stop_after_steps` halts once
/// the global step count reaches that value.
pub fn run_stage<F: Scalar>(
    mut params: Parameters<F>,
    examples: &[PretrainExample],
    cfg: &TrainConfig,
    resume: Option<TrainState<F>>,
    stop_after_steps: Option<u64>,
) -> Result<StageOutcome<F>, TrainError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n_val = examples.len() / 100;
    let (train, val) = examples.split_at(examples.len() - n_val);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let flags = cfg.loss_flags();

    let mut state = match resume {
        Some(state) => {
            if state.seed != cfg.seed {
                return Err(TrainError::Resume(format!(
                    "state seed {} != config seed {}",
                    state.seed, cfg.seed
                )));
            }
            if state.step > total_steps {
                return Err(TrainError::Resume(format!(
                    "state is at step {} of a {total_steps}-step run",
                    state.step
                )));
            }
            state
        }
        None => TrainState::new(&params, cfg),
    };

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    let epoch_start = state.step / steps_per_epoch;
    'epochs: for epoch in epoch_start..cfg.epochs as u64 {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch));
        order.shuffle(&mut rng);

        let batch_start = if epoch == epoch_start {
            state.step % steps_per_epoch
        } else {
            0
        };
        for batch_idx in batch_start..steps_per_epoch {
            if stop_after_steps.is_some_and(|s| state.step >= s) {
                stopped_early = true;
                break 'epochs;
            }
            let lo = (batch_idx as usize) * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(train.len());
            let beta = state.beta_current;

            let mut batch_grads = Gradients::zeros_like(&params);
            let mut gen_losses = Vec::new();
            let mut turn_losses = Vec::new();
            let mut mlm_losses = Vec::new();
            for &idx in &order[lo..hi] {
                let (parts, grads) =
                    example_losses(&params, &train[idx], flags, beta, true)?;
                batch_grads.add_assign(&grads.expect("requested gradients"));
                if let Some(l) = parts.gen {
                    gen_losses.push(l);
                }
                if let Some(l) = parts.turn {
                    turn_losses.push(l);
                }
                if let Some(l) = parts.mlm {
                    mlm_losses.push(l);
                }
            }
            batch_grads.scale(F::from_f64_c(1.0 / (hi - lo) as f64));

            let lr = lr_at(state.step + 1, total_steps, cfg);
            adam_step(&mut params, &batch_grads, &mut state, lr)?;

            let l_gen = mean(&gen_losses).unwrap_or(0.0);
            let l_turn = mean(&turn_losses);
            if !l_gen.is_finite() || l_turn.is_some_and(|l| !l.is_finite()) {
                return Err(TrainError::NonFinite("training loss".into()));
            }
            state.acc_gen += l_gen;
            state.acc_turn += l_turn.unwrap_or(0.0);
            state.acc_steps += 1;
            steps.push(StepRecord {
                step: state.step,
                lr,
                l_gen,
                l_turn,
                l_mlm: mean(&mlm_losses),
                beta,
            });
        }

        // Epoch boundary: validation losses, adaptive beta, reset.
        let mut val_gen = Vec::new();
        let mut val_turn = Vec::new();
        for example in val {
            let (parts, _) = example_losses(&params, example, flags, state.beta_current, false)?;
            if let Some(l) = parts.gen {
                val_gen.push(l);
            }
            if let Some(l) = parts.turn {
                val_turn.push(l);
            }
        }
        let beta_next = if cfg.beta_adaptive && state.acc_steps > 0 && state.acc_turn > 0.0 {
            let next = (state.acc_gen / state.acc_turn).clamp(BETA_MIN, BETA_MAX);
            state.beta_current = next;
            Some(next)
        } else {
            None
        };
        state.acc_gen = 0.0;
        state.acc_turn = 0.0;
        state.acc_steps = 0;
        epochs.push(EpochRecord {
            epoch,
            val_l_gen: mean(&val_gen),
            val_l_turn: mean(&val_turn),
            beta_next,
        });
    }

    Ok(StageOutcome {
        params,
        state,
        steps,
        epochs,
        stopped_early,
    })
}
