//! `SLTH` checkpoints: magic, `u32` version, `u32`-length-prefixed canonical
//! config text, `u32` tensor count, then per tensor a `u32`-length-prefixed
//! name, `u32` rank, `u32` dims and little-endian `f64` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vision::{read_f64s, read_u32};

use super::{Model, ModelConfig, ParamStore};

const MAGIC: &[u8; 4] = b"SLTH";
const VERSION: u32 = 1;

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn write_u32(out: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| format_err(format!("{v} exceeds u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_bytes(out: &mut impl Write, b: &[u8]) -> Result<()> {
    write_u32(out, b.len())?;
    out.write_all(b)?;
    Ok(())
}

fn read_string(input: &mut impl Read) -> Result<String> {
    let n = read_u32(input)? as usize;
    let mut buf = vec![0u8; n];
    input.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| format_err(e.to_string()))
}

pub fn write_checkpoint(model: &Model, mut out: impl Write) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    write_bytes(&mut out, model.config().to_canonical().as_bytes())?;
    write_u32(&mut out, model.params().len())?;
    for (name, t) in model.params().iter() {
        write_bytes(&mut out, name.as_bytes())?;
        write_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            write_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut input: impl Read) -> Result<Model> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(format_err(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let config = ModelConfig::from_canonical(&read_string(&mut input)?)?;
    let count = read_u32(&mut input)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = read_string(&mut input)?;
        let rank = read_u32(&mut input)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let data = read_f64s(&mut input, shape.iter().product())?;
        params.insert(name, Tensor::new(shape, data)?);
    }
    Model::from_parts(config, params)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
