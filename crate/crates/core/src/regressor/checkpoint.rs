//! Flat binary checkpoint.
//!
//! ```text
//! magic     8 bytes  "RLKTOYCK"
//! version   u32
//! config    u32 length + JSON bytes
//! tensors   u32 count, then per tensor: u32 name length, name bytes,
//!           u32 rank, u32 per dimension
//! data      f32 values of every tensor in manifest order
//! ```
//!
//! All integers and floats are little-endian. Parameters are stored as `f32`,
//! so loading rounds them to single precision.

use std::io::{Read, Write};
use std::path::Path;

use super::model::ToyModel;
use super::{RegressorError, Result, ToyModelConfig};

const MAGIC: &[u8; 8] = b"RLKTOYCK";
const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn bad(msg: impl Into<String>) -> RegressorError {
    RegressorError::Checkpoint(msg.into())
}

pub fn write_checkpoint(model: &ToyModel, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    put_u32(w, config.len() as u32)?;
    w.write_all(&config)?;
    put_u32(w, model.tensors().len() as u32)?;
    for t in model.tensors() {
        put_u32(w, t.name.len() as u32)?;
        w.write_all(t.name.as_bytes())?;
        put_u32(w, t.shape.len() as u32)?;
        for &d in &t.shape {
            put_u32(w, d as u32)?;
        }
    }
    for &v in model.parameters() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ToyModel> {
    if get_bytes(r, MAGIC.len())? != MAGIC {
        return Err(bad("not a toy model checkpoint"));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = get_u32(r)? as usize;
    let config: ToyModelConfig =
        serde_json::from_slice(&get_bytes(r, len)?).map_err(|e| bad(format!("config: {e}")))?;
    let reference = ToyModel::new(config.clone())?;
    let count = get_u32(r)? as usize;
    if count != reference.tensors().len() {
        return Err(bad(format!(
            "manifest lists {count} tensors, configuration implies {}",
            reference.tensors().len()
        )));
    }
    for expected in reference.tensors() {
        let n = get_u32(r)? as usize;
        let name =
            String::from_utf8(get_bytes(r, n)?).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = get_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| get_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if name != expected.name || shape != expected.shape {
            return Err(bad(format!(
                "tensor `{name}` {shape:?} does not match expected `{}` {:?}",
                expected.name, expected.shape
            )));
        }
    }
    let mut raw = vec![0u8; 4 * reference.parameter_count()];
    r.read_exact(&mut raw)
        .map_err(|_| bad("truncated parameter data"))?;
    let params = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ToyModel::from_parameters(config, params)
}

pub fn save_checkpoint(model: &ToyModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ToyModel> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut r)
}
