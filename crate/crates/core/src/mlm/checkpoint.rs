use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::model::{build_encoder, EncoderConfig, EncoderModel, Tensor};
use super::MlmError;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SOTKCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes header, JSON config block, then every tensor (name, shape,
/// little-endian `f32` values) in declaration order.
pub fn save_checkpoint<T: Scalar>(model: &EncoderModel<T>, path: &Path) -> Result<(), MlmError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg =
        serde_json::to_vec(model.config()).map_err(|e| MlmError::Checkpoint(e.to_string()))?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(model.tensors().len() as u32).to_le_bytes())?;
    for t in model.tensors() {
        w.write_all(&(t.name.len() as u16).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&[t.shape.len() as u8])?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &t.data {
            w.write_all(&x.to_le_f32())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_n<const N: usize>(r: &mut impl Read) -> Result<[u8; N], MlmError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<EncoderModel<T>, MlmError> {
    let mut r = BufReader::new(File::open(path)?);
    if &read_n::<8>(&mut r)? != CHECKPOINT_MAGIC {
        return Err(MlmError::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(read_n(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(MlmError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let len = u32::from_le_bytes(read_n(&mut r)?) as usize;
    let mut cfg = vec![0u8; len];
    r.read_exact(&mut cfg)?;
    let config: EncoderConfig =
        serde_json::from_slice(&cfg).map_err(|e| MlmError::Checkpoint(e.to_string()))?;
    let mut model = build_encoder::<T>(&config)?;
    let n = u32::from_le_bytes(read_n(&mut r)?) as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = u16::from_le_bytes(read_n(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| MlmError::Checkpoint(e.to_string()))?;
        let ndim = read_n::<1>(&mut r)?[0] as usize;
        let shape = (0..ndim)
            .map(|_| Ok(u64::from_le_bytes(read_n(&mut r)?) as usize))
            .collect::<Result<Vec<_>, MlmError>>()?;
        let count: usize = shape.iter().product();
        let mut raw = vec![0u8; count * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        tensors.push(Tensor { name, shape, data });
    }
    model.load_tensors(tensors)?;
    Ok(model)
}
