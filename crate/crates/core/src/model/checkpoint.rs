//! Checkpoint persistence: a human-readable text manifest plus a raw
//! little-endian `f64` blob.
//!
//! `{prefix}.manifest` lays out, line by line: the format version, the
//! global step, the RNG seed, every model-config field as `config.<name>
//! <value>`, and one `tensor <name> <dim>... <offset>` line per tensor in
//! storage order (offsets count `f64` elements into the blob).
//! `{prefix}.blob` holds all tensor data concatenated in that order. Extra
//! tensors (optimizer state, running accumulators) ride along under their
//! own names after the model tensors.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::ArrayD;

use super::{ModelConfig, ModelError, Parameters};
use crate::Scalar;

/// First manifest line; bumped only on breaking format changes.
pub const CHECKPOINT_VERSION: &str = "turnforge-ckpt v1";

/// A loaded checkpoint: config, counters, and all tensors (model tensors
/// first, then extras) in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F: Scalar> {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub tensors: IndexMap<String, ArrayD<F>>,
}

/// Non-model tensors stored alongside the parameters (optimizer state,
/// counters) keyed by name.
pub type Extras<F> = IndexMap<String, ArrayD<F>>;

impl<F: Scalar> Checkpoint<F> {
    /// Splits the tensor map into model parameters and extras.
    pub fn into_parts(mut self) -> Result<(Parameters<F>, Extras<F>), ModelError> {
        let mut model_tensors = IndexMap::new();
        for name in self.config.tensor_shapes().keys() {
            let tensor = self
                .tensors
                .shift_remove(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing model tensor {name}")))?;
            model_tensors.insert(name.clone(), tensor);
        }
        let params = Parameters::from_parts(self.config, model_tensors)?;
        Ok((params, self.tensors))
    }
}

fn manifest_path(prefix: &Path) -> std::path::PathBuf {
    prefix.with_extension("manifest")
}

fn blob_path(prefix: &Path) -> std::path::PathBuf {
    prefix.with_extension("blob")
}

fn config_fields(config: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("vocab_size", config.vocab_size.to_string()),
        ("d_model", config.d_model.to_string()),
        ("n_heads", config.n_heads.to_string()),
        ("n_enc_layers", config.n_enc_layers.to_string()),
        ("n_dec_layers", config.n_dec_layers.to_string()),
        ("d_ff", config.d_ff.to_string()),
        ("window", config.window.to_string()),
        ("max_positions_enc", config.max_positions_enc.to_string()),
        ("max_positions_dec", config.max_positions_dec.to_string()),
        ("dropout_rate", config.dropout_rate.to_string()),
    ]
}

/// Writes `{prefix}.manifest` and `{prefix}.blob`. Model tensors come
/// first, then `extras` in their map order. Tensor names must be
/// whitespace-free.
pub fn save_checkpoint<F: Scalar>(
    prefix: &Path,
    params: &Parameters<F>,
    step: u64,
    seed: u64,
    extras: &IndexMap<String, ArrayD<F>>,
) -> Result<(), ModelError> {
    let mut manifest = String::new();
    writeln!(manifest, "{CHECKPOINT_VERSION}").expect("string write");
    writeln!(manifest, "step {step}").expect("string write");
    writeln!(manifest, "seed {seed}").expect("string write");
    for (field, value) in config_fields(params.config()) {
        writeln!(manifest, "config.{field} {value}").expect("string write");
    }

    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    let all = params.tensors().iter().chain(extras.iter());
    for (name, tensor) in all {
        if name.chars().any(char::is_whitespace) || name.is_empty() {
            return Err(ModelError::Checkpoint(format!(
                "tensor name {name:?} is empty or contains whitespace"
            )));
        }
        write!(manifest, "tensor {name}").expect("string write");
        for dim in tensor.shape() {
            write!(manifest, " {dim}").expect("string write");
        }
        writeln!(manifest, " {offset}").expect("string write");
        for &v in tensor.iter() {
            blob.extend_from_slice(&v.to_f64_c().to_le_bytes());
        }
        offset += tensor.len();
    }

    std::fs::write(manifest_path(prefix), manifest)?;
    std::fs::write(blob_path(prefix), blob)?;
    Ok(())
}

/// Reads a checkpoint saved by [`save_checkpoint`], validating version,
/// config completeness, offsets, and blob size.
pub fn load_checkpoint<F: Scalar>(prefix: &Path) -> Result<Checkpoint<F>, ModelError> {
    let manifest = std::fs::read_to_string(manifest_path(prefix))?;
    let blob = std::fs::read(blob_path(prefix))?;
    let fail = |msg: String| ModelError::Checkpoint(msg);

    let mut lines = manifest.lines();
    let version = lines.next().ok_or_else(|| fail("empty manifest".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "unsupported version {version:?}, expected {CHECKPOINT_VERSION:?}"
        )));
    }

    let mut step: Option<u64> = None;
    let mut seed: Option<u64> = None;
    let mut config_values: IndexMap<String, String> = IndexMap::new();
    let mut tensor_lines: Vec<(String, Vec<usize>, usize)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let mut parts = line.split_whitespace();
        let key = parts
            .next()
            .ok_or_else(|| fail(format!("blank manifest line {}", lineno + 2)))?;
        match key {
            "step" | "seed" => {
                let value: u64 = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| fail(format!("bad {key} line {}", lineno + 2)))?;
                let slot = if key == "step" { &mut step } else { &mut seed };
                if slot.replace(value).is_some() {
                    return Err(fail(format!("duplicate {key} line")));
                }
            }
            _ if key.starts_with("config.") => {
                let value = parts
                    .next()
                    .ok_or_else(|| fail(format!("bad config line {}", lineno + 2)))?;
                if config_values
                    .insert(key["config.".len()..].into(), value.into())
                    .is_some()
                {
                    return Err(fail(format!("duplicate {key} line")));
                }
            }
            "tensor" => {
                let name = parts
                    .next()
                    .ok_or_else(|| fail(format!("tensor line {} has no name", lineno + 2)))?;
                let numbers: Vec<usize> = parts
                    .map(|p| {
                        p.parse()
                            .map_err(|_| fail(format!("bad tensor line {}", lineno + 2)))
                    })
                    .collect::<Result<_, _>>()?;
                if numbers.is_empty() {
                    return Err(fail(format!("tensor line {} has no offset", lineno + 2)));
                }
                let (dims, offset) = numbers.split_at(numbers.len() - 1);
                tensor_lines.push((name.into(), dims.to_vec(), offset[0]));
            }
            other => return Err(fail(format!("unknown manifest key {other:?}"))),
        }
    }

    let step = step.ok_or_else(|| fail("manifest lacks a step line".into()))?;
    let seed = seed.ok_or_else(|| fail("manifest lacks a seed line".into()))?;
    let get_usize = |name: &str| -> Result<usize, ModelError> {
        config_values
            .get(name)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| fail(format!("config field {name} missing or malformed")))
    };
    let config = ModelConfig {
        vocab_size: get_usize("vocab_size")?,
        d_model: get_usize("d_model")?,
        n_heads: get_usize("n_heads")?,
        n_enc_layers: get_usize("n_enc_layers")?,
        n_dec_layers: get_usize("n_dec_layers")?,
        d_ff: get_usize("d_ff")?,
        window: get_usize("window")?,
        max_positions_enc: get_usize("max_positions_enc")?,
        max_positions_dec: get_usize("max_positions_dec")?,
        dropout_rate: config_values
            .get("dropout_rate")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| fail("config field dropout_rate missing or malformed".into()))?,
    };
    if config_values.len() != 10 {
        let known = [
            "vocab_size", "d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff", "window",
            "max_positions_enc", "max_positions_dec", "dropout_rate",
        ];
        let unknown: Vec<&String> = config_values
            .keys()
            .filter(|k| !known.contains(&k.as_str()))
            .collect();
        return Err(fail(format!("unknown config fields {unknown:?}")));
    }

    if blob.len() % 8 != 0 {
        return Err(fail(format!("blob size {} is not a multiple of 8", blob.len())));
    }
    let total_elems = blob.len() / 8;
    let mut tensors = IndexMap::new();
    let mut expected_offset = 0usize;
    for (name, dims, offset) in tensor_lines {
        if offset != expected_offset {
            return Err(fail(format!(
                "tensor {name} declares offset {offset}, expected {expected_offset}"
            )));
        }
        let len: usize = dims.iter().product();
        if offset + len > total_elems {
            return Err(fail(format!(
                "tensor {name} overruns the blob ({} elements)",
                total_elems
            )));
        }
        let data: Vec<F> = blob[offset * 8..(offset + len) * 8]
            .chunks_exact(8)
            .map(|c| F::from_f64_c(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
            .collect();
        let tensor = ArrayD::from_shape_vec(dims, data)
            .map_err(|e| fail(format!("tensor {name} shape error: {e}")))?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(fail(format!("duplicate tensor {name}")));
        }
        expected_offset = offset + len;
    }
    if expected_offset != total_elems {
        return Err(fail(format!(
            "blob holds {total_elems} elements but manifest accounts for {expected_offset}"
        )));
    }

    Ok(Checkpoint {
        config,
        step,
        seed,
        tensors,
    })
}
