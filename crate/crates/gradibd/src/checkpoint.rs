//! Versioned binary checkpoints: named parameter arrays with shapes,
//! optimizer moments, and the full run config, all little-endian `f64`
//! so a round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::config::RunConfig;
use crate::diff::{AdamSlot, AdamState};
use crate::model::{ModelError, ModelParams};

const MAGIC: &[u8; 4] = b"GRDB";
pub const FORMAT_VERSION: u32 = 1;

/// Guard against nonsense length prefixes in corrupt files.
const MAX_LEN: u64 = 1 << 33;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}, this build reads {FORMAT_VERSION}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything needed to resume or evaluate a trained fold.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ModelParams,
    pub adam: AdamState,
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(bytes.len() as u64)?;
    w.write_all(bytes)
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(values.len() as u64)?;
    for &v in values {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_len<R: Read>(r: &mut R, what: &str) -> Result<usize, CheckpointError> {
    let len = r.read_u64::<LittleEndian>()?;
    if len > MAX_LEN {
        return Err(CheckpointError::Corrupt(format!(
            "{what} length {len} is implausible"
        )));
    }
    Ok(len as usize)
}

fn read_bytes<R: Read>(r: &mut R, what: &str) -> Result<Vec<u8>, CheckpointError> {
    let len = read_len(r, what)?;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_f64s<R: Read>(r: &mut R, what: &str) -> Result<Vec<f64>, CheckpointError> {
    let len = read_len(r, what)?;
    let mut buf = vec![0f64; len];
    r.read_f64_into::<LittleEndian>(&mut buf)?;
    Ok(buf)
}

pub fn save(path: &Path, checkpoint: &Checkpoint) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;

    let config_json = serde_json::to_string(&checkpoint.config)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    write_bytes(&mut w, config_json.as_bytes())?;
    w.write_u64::<LittleEndian>(checkpoint.params.n_codes as u64)?;

    let shapes = checkpoint.params.named_shapes();
    let buffers = checkpoint.params.buffers();
    w.write_u64::<LittleEndian>(shapes.len() as u64)?;
    for ((name, shape), buffer) in shapes.iter().zip(buffers) {
        write_bytes(&mut w, name.as_bytes())?;
        w.write_u64::<LittleEndian>(shape.len() as u64)?;
        for &d in shape {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        write_f64s(&mut w, buffer)?;
    }

    w.write_u64::<LittleEndian>(checkpoint.adam.step)?;
    w.write_u64::<LittleEndian>(checkpoint.adam.slots.len() as u64)?;
    for slot in &checkpoint.adam.slots {
        write_f64s(&mut w, &slot.m)?;
        write_f64s(&mut w, &slot.v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }

    let config_json = read_bytes(&mut r, "config")?;
    let config_json = String::from_utf8(config_json)
        .map_err(|e| CheckpointError::Corrupt(format!("config is not UTF-8: {e}")))?;
    let config: RunConfig = serde_json::from_str(&config_json)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    let n_codes = read_len(&mut r, "n_codes")?;

    // Seed value is irrelevant: every buffer is overwritten below.
    let mut params = ModelParams::init(&config.model, n_codes, 0)?;
    let expected = params.named_shapes();
    let n_arrays = read_len(&mut r, "array count")?;
    if n_arrays != expected.len() {
        return Err(CheckpointError::Corrupt(format!(
            "expected {} parameter arrays, found {n_arrays}",
            expected.len()
        )));
    }
    {
        let mut buffers = params.buffers_mut();
        for ((name, shape), buffer) in expected.iter().zip(buffers.iter_mut()) {
            let stored_name = String::from_utf8(read_bytes(&mut r, "array name")?)
                .map_err(|e| CheckpointError::Corrupt(format!("array name not UTF-8: {e}")))?;
            if &stored_name != name {
                return Err(CheckpointError::Corrupt(format!(
                    "expected array {name:?}, found {stored_name:?}"
                )));
            }
            let ndim = read_len(&mut r, "array rank")?;
            let mut stored_shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                stored_shape.push(read_len(&mut r, "array dim")?);
            }
            if &stored_shape != shape {
                return Err(CheckpointError::Corrupt(format!(
                    "array {name} has shape {stored_shape:?}, config implies {shape:?}"
                )));
            }
            let data = read_f64s(&mut r, "array data")?;
            if data.len() != buffer.len() {
                return Err(CheckpointError::Corrupt(format!(
                    "array {name} holds {} values, shape implies {}",
                    data.len(),
                    buffer.len()
                )));
            }
            buffer.copy_from_slice(&data);
        }
    }

    let step = r.read_u64::<LittleEndian>()?;
    let n_slots = read_len(&mut r, "adam slot count")?;
    let mut slots = Vec::with_capacity(n_slots);
    for _ in 0..n_slots {
        let m = read_f64s(&mut r, "adam m")?;
        let v = read_f64s(&mut r, "adam v")?;
        if m.len() != v.len() {
            return Err(CheckpointError::Corrupt(
                "adam slot m/v lengths differ".into(),
            ));
        }
        slots.push(AdamSlot { m, v });
    }

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes after data".into()));
    }

    Ok(Checkpoint {
        config,
        params,
        adam: AdamState { step, slots },
    })
}
