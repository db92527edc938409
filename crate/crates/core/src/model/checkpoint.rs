//! Binary checkpoint layout (little-endian):
//!
//! ```text
//! magic "T2LMODEL" | u32 version | u32 len, config JSON
//! u32 param count | per param: u32 len, name, u64 rows, u64 cols, f64 data
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, Tail2LearnModel};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"T2LMODEL";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint(model: &Tail2LearnModel, w: &mut impl Write) -> Result<()> {
    let json = serde_json::to_vec(model.config()).map_err(|e| bad(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let names = model.param_names();
    w.write_all(&(names.len() as u32).to_le_bytes())?;
    for (name, p) in names.iter().zip(model.params()) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(p.rows() as u64).to_le_bytes())?;
        w.write_all(&(p.cols() as u64).to_le_bytes())?;
        for v in p.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(bad("truncated"));
    }
    Ok(buf)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Tail2LearnModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let json_len = read_u32(r)? as usize;
    let config: ModelConfig =
        serde_json::from_slice(&read_bytes(r, json_len)?).map_err(|e| bad(e.to_string()))?;
    let count = read_u32(r)? as usize;
    let expected = Tail2LearnModel::init(config.clone(), 0)?;
    if count != expected.params().len() {
        return Err(bad(format!("expected {} parameters, found {count}", expected.params().len())));
    }
    let mut params = Vec::with_capacity(count);
    for (name, reference) in expected.param_names().iter().zip(expected.params()) {
        let len = read_u32(r)? as usize;
        let found = String::from_utf8(read_bytes(r, len)?).map_err(|_| bad("non-utf8 name"))?;
        if &found != name {
            return Err(bad(format!("expected parameter {name}, found {found}")));
        }
        let rows = read_u64(r)? as usize;
        let cols = read_u64(r)? as usize;
        if (rows, cols) != reference.shape() {
            return Err(bad(format!("{name}: shape {rows}x{cols} mismatches config")));
        }
        let raw = read_bytes(r, rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Matrix::from_vec(rows, cols, data)?);
    }
    Tail2LearnModel::from_parts(config, params)
}

pub fn save_checkpoint(model: &Tail2LearnModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Tail2LearnModel> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
