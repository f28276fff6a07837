//! On-disk shard format for prepared training examples.
//!
//! A shard is a one-line ASCII header naming the format version and field
//! order, followed by binary records. Every record stores seven fields, each
//! encoded as a little-endian `u32` count followed by that many
//! little-endian `u32` values:
//!
//! ```text
//! encoder_ids target_ids sentence_starts turn_labels
//! masked_sentence_indices masked_word_positions masked_word_originals
//! ```
//!
//! Turn labels are stored as `0`/`1`. Records run to end of file; a partial
//! record is a format error.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::PretrainExample;

/// Header line written at the top of every shard file.
pub const SHARD_HEADER: &str = "turnforge-shard v1 u32le encoder_ids target_ids sentence_starts \
     turn_labels masked_sentence_indices masked_word_positions masked_word_originals";

#[derive(Debug, Error)]
pub enum ShardError {
    #[error("shard i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad shard header: {0}")]
    BadHeader(String),
    #[error("malformed shard record {record}: {message}")]
    BadRecord { record: usize, message: String },
    #[error("value does not fit the shard encoding: {0}")]
    ValueTooLarge(usize),
}

fn write_field(w: &mut impl Write, values: &[u32]) -> Result<(), ShardError> {
    let count = u32::try_from(values.len()).map_err(|_| ShardError::ValueTooLarge(values.len()))?;
    w.write_all(&count.to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn to_u32s(values: &[usize]) -> Result<Vec<u32>, ShardError> {
    values
        .iter()
        .map(|&v| u32::try_from(v).map_err(|_| ShardError::ValueTooLarge(v)))
        .collect()
}

/// Writes `examples` to `path` in shard format.
pub fn write_shard(path: &Path, examples: &[PretrainExample]) -> Result<(), ShardError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{SHARD_HEADER}")?;
    for ex in examples {
        write_field(&mut w, &ex.encoder_ids)?;
        write_field(&mut w, &ex.target_ids)?;
        write_field(&mut w, &to_u32s(&ex.sentence_starts)?)?;
        let labels: Vec<u32> = ex.turn_labels.iter().map(|&b| b as u32).collect();
        write_field(&mut w, &labels)?;
        write_field(&mut w, &to_u32s(&ex.masked_sentence_indices)?)?;
        write_field(&mut w, &to_u32s(&ex.masked_word_positions)?)?;
        write_field(&mut w, &ex.masked_word_originals)?;
    }
    w.flush()?;
    Ok(())
}

struct FieldReader<R: Read> {
    inner: R,
    record: usize,
}

impl<R: Read> FieldReader<R> {
    /// Reads one `u32`; `None` cleanly at end of file, error mid-value.
    fn read_u32_or_eof(&mut self) -> Result<Option<u32>, ShardError> {
        let mut buf = [0u8; 4];
        let mut filled = 0;
        while filled < 4 {
            let n = self.inner.read(&mut buf[filled..])?;
            if n == 0 {
                if filled == 0 {
                    return Ok(None);
                }
                return Err(ShardError::BadRecord {
                    record: self.record,
                    message: "file ends in the middle of a value".into(),
                });
            }
            filled += n;
        }
        Ok(Some(u32::from_le_bytes(buf)))
    }

    fn read_field(&mut self) -> Result<Vec<u32>, ShardError> {
        let count = self.read_u32_or_eof()?.ok_or(ShardError::BadRecord {
            record: self.record,
            message: "file ends in the middle of a record".into(),
        })?;
        let mut values = Vec::with_capacity(count as usize);
        for _ in 0..count {
            values.push(self.read_u32_or_eof()?.ok_or(ShardError::BadRecord {
                record: self.record,
                message: "file ends before the declared field length".into(),
            })?);
        }
        Ok(values)
    }
}

/// Reads a shard written by [`write_shard`], validating header and record
/// structure.
pub fn read_shard(path: &Path) -> Result<Vec<PretrainExample>, ShardError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        match r.read(&mut byte)? {
            0 => return Err(ShardError::BadHeader("missing header line".into())),
            _ if byte[0] == b'\n' => break,
            _ => header.push(byte[0]),
        }
        if header.len() > 4096 {
            return Err(ShardError::BadHeader("header line too long".into()));
        }
    }
    let header = String::from_utf8(header)
        .map_err(|e| ShardError::BadHeader(format!("header is not utf-8: {e}")))?;
    if header != SHARD_HEADER {
        return Err(ShardError::BadHeader(format!(
            "expected {SHARD_HEADER:?}, found {header:?}"
        )));
    }

    let mut reader = FieldReader { inner: r, record: 0 };
    let mut examples = Vec::new();
    // Record boundary: a clean EOF is the end of the shard.
    while let Some(first) = reader.read_u32_or_eof()? {
        let mut encoder_ids = Vec::with_capacity(first as usize);
        for _ in 0..first {
            encoder_ids.push(reader.read_u32_or_eof()?.ok_or(ShardError::BadRecord {
                record: reader.record,
                message: "file ends before the declared field length".into(),
            })?);
        }
        let target_ids = reader.read_field()?;
        let sentence_starts: Vec<usize> = reader
            .read_field()?
            .into_iter()
            .map(|v| v as usize)
            .collect();
        let mut turn_labels = Vec::new();
        for v in reader.read_field()? {
            match v {
                0 => turn_labels.push(false),
                1 => turn_labels.push(true),
                other => {
                    return Err(ShardError::BadRecord {
                        record: reader.record,
                        message: format!("turn label must be 0 or 1, got {other}"),
                    })
                }
            }
        }
        let masked_sentence_indices: Vec<usize> = reader
            .read_field()?
            .into_iter()
            .map(|v| v as usize)
            .collect();
        let masked_word_positions: Vec<usize> = reader
            .read_field()?
            .into_iter()
            .map(|v| v as usize)
            .collect();
        let masked_word_originals = reader.read_field()?;

        if turn_labels.len() != sentence_starts.len() {
            return Err(ShardError::BadRecord {
                record: reader.record,
                message: format!(
                    "{} turn labels for {} sentences",
                    turn_labels.len(),
                    sentence_starts.len()
                ),
            });
        }
        if masked_word_positions.len() != masked_word_originals.len() {
            return Err(ShardError::BadRecord {
                record: reader.record,
                message: format!(
                    "{} masked word positions but {} originals",
                    masked_word_positions.len(),
                    masked_word_originals.len()
                ),
            });
        }

        examples.push(PretrainExample {
            encoder_ids,
            target_ids,
            turn_labels,
            sentence_starts,
            masked_sentence_indices,
            masked_word_positions,
            masked_word_originals,
        });
        reader.record += 1;
    }
    Ok(examples)
}
