// SPDX-License-Identifier: MIT OR Apache-2.0

//! `EAPG1` checkpoints: magic, little-endian u64 header length, JSON header,
//! then the raw little-endian f32 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{parameter_manifest, Model, ModelConfig};
use crate::autodiff::{Float, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"EAPG1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Serialize `model` with 32-bit parameters.
pub fn write_checkpoint<F: Float>(mut w: impl Write, model: &Model<F>) -> Result<()> {
    let mut offset = 0;
    let tensors = parameter_manifest(model.config())
        .into_iter()
        .map(|(name, shape)| {
            let entry = TensorEntry {
                name,
                offset,
                shape: shape.clone(),
            };
            offset += shape.iter().product::<usize>() * 4;
            entry
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        tensors,
    })?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for p in model.params() {
        for &x in p.data() {
            w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Model<f32>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len))
        .map_err(|_| Error::Checkpoint("header length overflows".into()))?;
    if len > 64 << 20 {
        return Err(Error::Checkpoint(format!(
            "implausible header length {len}"
        )));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    header.config.validate()?;
    let manifest = parameter_manifest(&header.config);
    if manifest.len() != header.tensors.len() {
        return Err(Error::Checkpoint(
            "tensor manifest does not match config".into(),
        ));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut params = Vec::with_capacity(manifest.len());
    for ((name, shape), entry) in manifest.iter().zip(&header.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "unexpected tensor {} {:?}",
                entry.name, entry.shape
            )));
        }
        let n: usize = shape.iter().product();
        let bytes = payload
            .get(entry.offset..entry.offset + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("payload truncated in {name}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(Tensor::new(shape.clone(), data)?);
    }
    Model::from_params(header.config, params)
}

pub fn save_checkpoint<F: Float>(path: impl AsRef<Path>, model: &Model<F>) -> Result<()> {
    if let Some(dir) = path.as_ref().parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_checkpoint(BufWriter::new(File::create(path)?), model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = Model::<f32>::new(ModelConfig::induction_toy(11, 7, 9)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m).unwrap();
        assert_eq!(&buf[..5], CHECKPOINT_MAGIC);
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in m.params().iter().zip(back.params()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn rejects_truncated_payload() {
        let m = Model::<f32>::new(ModelConfig::induction_toy(11, 7, 9)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
