//! Binary checkpoint format.
//!
//! ```text
//! magic      5 bytes   "ASREP"
//! version    u32 LE    1
//! vocab_size u32 LE    number of real items |V|
//! hidden     u32 LE    d
//! max_len    u32 LE    n
//! layers     u32 LE    L
//! heads      u32 LE    h
//! ffn        u32 LE    d_ff
//! arrays     f32 LE    every parameter array, in ModelParams::arrays() order
//! ```
//!
//! Parameters are held as `f64` in memory and stored as `f32`, so a model
//! that has been through [`ModelParams::round_to_f32`] survives a round trip
//! bit for bit.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dataset::Vocabulary;
use crate::encoder::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"ASREP";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 5 + 4 * 7;

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> std::io::Result<()> {
    let c = params.config();
    w.write_all(MAGIC)?;
    for v in [VERSION as usize, c.vocab_size, c.hidden, c.max_len, c.layers, c.heads, c.ffn] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for array in params.arrays() {
        for &v in array {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Checkpoint(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..5] != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..5]))));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let version = field(0) as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let config = ModelConfig {
        vocab_size: field(1),
        hidden: field(2),
        max_len: field(3),
        layers: field(4),
        heads: field(5),
        ffn: field(6),
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid header dimensions: {e}")))?;
    let mut params = ModelParams::zeros(config)?;
    let expected: usize = params.shapes().iter().sum::<usize>() * 4;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} bytes of parameters for {config:?}, found {}",
            body.len()
        )));
    }
    let mut values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    for array in params.arrays_mut() {
        for slot in array {
            *slot = values.next().expect("length checked");
        }
    }
    if !params.is_finite() {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    if params.item_embeddings.row(0).iter().any(|&v| v != 0.0) {
        return Err(Error::Checkpoint("padding row is not zero".into()));
    }
    Ok(params)
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write_checkpoint(params, BufWriter::new(file)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

/// Loads a checkpoint and checks it was trained on `vocab`.
pub fn load_checkpoint_for(path: &Path, vocab: &Vocabulary) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    let size = params.config().vocab_size;
    if size != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {size} items but the vocabulary has {}",
            vocab.len()
        )));
    }
    Ok(params)
}
