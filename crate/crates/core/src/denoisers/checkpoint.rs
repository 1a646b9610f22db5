//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"FCNT"  u32 version  u32 config_len  config_json
//! u32 tensor_count
//! repeated: u32 name_len  name_utf8  u32 rank  u32 dims[rank]  f64 data[prod(dims)]
//! ```
//!
//! Tensors are stored in [`TinyParams::named`] order and row-major.

use std::io::{Read, Write};
use std::path::Path;

use super::tiny::{TinyConfig, TinyParams};
use super::DenoiseError;

pub const MAGIC: &[u8; 4] = b"FCNT";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> DenoiseError {
    DenoiseError::Checkpoint(msg.into())
}

pub fn write_params<W: Write>(params: &TinyParams, mut out: W) -> Result<(), DenoiseError> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&params.config).map_err(|e| bad(e.to_string()))?;
    out.write_all(&(config.len() as u32).to_le_bytes())?;
    out.write_all(&config)?;
    let named = params.named();
    out.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, p) in named {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &p.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, DenoiseError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_params<R: Read>(mut r: R) -> Result<TinyParams, DenoiseError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    let mut config = vec![0u8; len];
    r.read_exact(&mut config)?;
    let config: TinyConfig = serde_json::from_slice(&config).map_err(|e| bad(e.to_string()))?;
    let mut params = TinyParams::init(config, 0);
    let count = read_u32(&mut r)? as usize;
    let mut slots = params.named_mut();
    if count != slots.len() {
        return Err(bad(format!(
            "expected {} tensors, found {count}",
            slots.len()
        )));
    }
    for (expected, p) in slots.iter_mut() {
        let n = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        if &name != expected {
            return Err(bad(format!("expected tensor {expected}, found {name}")));
        }
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if shape != p.shape {
            return Err(bad(format!(
                "{name}: shape {shape:?}, expected {:?}",
                p.shape
            )));
        }
        let mut buf = [0u8; 8];
        for v in p.data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    Ok(params)
}

pub fn save(params: &TinyParams, path: &Path) -> Result<(), DenoiseError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_params(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TinyParams, DenoiseError> {
    read_params(std::io::BufReader::new(std::fs::File::open(path)?))
}
