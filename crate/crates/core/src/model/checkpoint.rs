//! Checkpoint archive.
//!
//! Layout: the 8-byte magic `ADRKCKPT`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then every tensor's data as little-endian `f64` in
//! header order. The header records the model config and, per tensor, its
//! canonical name (`layer.3.query`, `head`, ...) and shape.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TransformerModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ADRKCKPT";

#[derive(Serialize, Deserialize)]
struct Header {
    tool_version: String,
    config: ModelConfig,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint(model: &TransformerModel, mut out: impl Write) -> Result<()> {
    let named = model.named_tensors();
    let header = Header {
        tool_version: crate::TOOL_VERSION.to_string(),
        config: model.config().clone(),
        tensors: named
            .iter()
            .map(|(name, t)| Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, t) in named {
        let mut buf = Vec::with_capacity(t.len() * 8);
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(mut input: impl Read) -> Result<TransformerModel> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 4];
    input.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut model = TransformerModel::init(&header.config, 0)?;
    let expected = model.named_tensors().len();
    if header.tensors.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} tensors, header lists {}",
            header.tensors.len()
        )));
    }
    for entry in &header.tensors {
        let slot = model
            .tensor_mut(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", entry.name)))?;
        if slot.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} does not match config ({:?})",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        let mut bytes = vec![0u8; slot.len() * 8];
        input.read_exact(&mut bytes)?;
        for (x, chunk) in slot.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &TransformerModel, path: &Path) -> Result<()> {
    let write = || -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(model, &mut w)?;
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| e.in_file(path))
}

pub fn load_checkpoint(path: &Path) -> Result<TransformerModel> {
    std::fs::File::open(path)
        .map_err(Error::from)
        .and_then(|f| read_checkpoint(std::io::BufReader::new(f)))
        .map_err(|e| e.in_file(path))
}

/// True when the file starts with the checkpoint magic.
pub fn is_checkpoint(path: &Path) -> bool {
    let mut magic = [0u8; 8];
    std::fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map(|_| &magic == MAGIC)
        .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = ModelConfig {
            num_layers: 1,
            d_model: 8,
            num_heads: 2,
            d_ff: 12,
            vocab_size: 20,
            max_seq_len: 4,
            num_classes: 2,
        };
        let model = TransformerModel::init(&cfg, 11).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.checksum(), model.checksum());
        assert_eq!(back, model);

        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(read_checkpoint(corrupt.as_slice()).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}
