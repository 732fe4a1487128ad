//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   b"TCKPT\0\0\x01"
//! spec hash   32 bytes   caller-supplied digest of the model description
//! count        u32       number of parameters
//! per parameter, in set order:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   rank       u32
//!   extents    rank x u32
//!   values     prod(extents) x f32
//! ```

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TCKPT\0\0\x01";
pub type SpecHash = [u8; 32];

pub fn write(mut w: impl Write, spec_hash: &SpecHash, params: &ParamSet<f32>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(spec_hash)?;
    write_u32(&mut w, params.len())?;
    for (_, p) in params.iter() {
        write_u32(&mut w, p.name.len())?;
        w.write_all(p.name.as_bytes())?;
        write_u32(&mut w, p.value.shape().len())?;
        for &e in p.value.shape() {
            write_u32(&mut w, e)?;
        }
        let mut buf = Vec::with_capacity(p.value.numel() * 4);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn to_bytes(spec_hash: &SpecHash, params: &ParamSet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    write(&mut out, spec_hash, params).expect("writing to a Vec cannot fail");
    out
}

/// Reads a checkpoint and returns its spec hash with the parameters.
pub fn read(mut r: impl Read) -> Result<(SpecHash, ParamSet<f32>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let mut hash = [0u8; 32];
    r.read_exact(&mut hash)?;
    let count = read_u32(&mut r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = read_u32(&mut r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| TensorError::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)?;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok((hash, params))
}

/// Like [`read`], but rejects a checkpoint written for a different spec.
pub fn read_expecting(r: impl Read, expected: &SpecHash) -> Result<ParamSet<f32>> {
    let (hash, params) = read(r)?;
    if &hash != expected {
        return Err(TensorError::Checkpoint(
            "spec hash does not match the requested model".into(),
        ));
    }
    Ok(params)
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| TensorError::Checkpoint(format!("{v} overflows u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}
