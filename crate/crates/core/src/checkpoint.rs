//! Tensor container: a one-line JSON manifest followed by concatenated
//! little-endian f64 payloads. Loading verifies the payload hash; saving a
//! loaded container reproduces it byte for byte.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
    /// Element count.
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    step: usize,
    config: serde_json::Value,
    payload_sha256: String,
    dtype: String,
    tensors: Vec<IndexEntry>,
}

/// A checkpoint: named tensors (parameters plus optimizer state) with the
/// step counter and a config echo.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: usize,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn payload_of(tensors: &[(String, Tensor)]) -> (Vec<u8>, Vec<IndexEntry>) {
    let mut payload = Vec::new();
    let mut index = Vec::new();
    for (name, t) in tensors {
        let offset = payload.len();
        for x in &t.data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        index.push(IndexEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            offset,
            len: t.numel(),
        });
    }
    (payload, index)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let (payload, tensors) = payload_of(&ckpt.tensors);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: "checkpoint".into(),
        step: ckpt.step,
        config: ckpt.config.clone(),
        payload_sha256: hex(&Sha256::digest(&payload)),
        dtype: "f64".into(),
        tensors,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    f.write_all(&payload)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = Vec::new();
    read_line(&mut f, &mut header)?;
    let manifest: Manifest = serde_json::from_slice(&header)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    if manifest.dtype != "f64" {
        return Err(Error::CheckpointFormat(format!("unsupported dtype {}", manifest.dtype)));
    }
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    let digest = hex(&Sha256::digest(&payload));
    if digest != manifest.payload_sha256 {
        return Err(Error::CheckpointFormat(format!(
            "payload hash mismatch: manifest {} vs actual {digest}",
            manifest.payload_sha256
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if numel != e.len || e.offset + 8 * e.len > payload.len() {
            return Err(Error::CheckpointFormat(format!("bad index entry for tensor {}", e.name)));
        }
        let mut data = Vec::with_capacity(e.len);
        for i in 0..e.len {
            let start = e.offset + 8 * i;
            let bytes: [u8; 8] = payload[start..start + 8].try_into().unwrap();
            data.push(f64::from_le_bytes(bytes));
        }
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)));
    }
    Ok(Checkpoint { step: manifest.step, config: manifest.config, tensors })
}

/// Single-tensor file: same container with one entry.
pub fn save_tensor(path: &Path, name: &str, tensor: &Tensor) -> Result<()> {
    save_checkpoint(
        path,
        &Checkpoint {
            step: 0,
            config: serde_json::Value::Null,
            tensors: vec![(name.to_string(), tensor.clone())],
        },
    )
}

pub fn load_tensor(path: &Path) -> Result<(String, Tensor)> {
    let ckpt = load_checkpoint(path)?;
    ckpt.tensors
        .into_iter()
        .next()
        .ok_or_else(|| Error::CheckpointFormat("container holds no tensors".into()))
}

fn read_line(r: &mut impl Read, buf: &mut Vec<u8>) -> Result<()> {
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            return Ok(());
        }
        buf.push(byte[0]);
        if buf.len() > 64 * 1024 * 1024 {
            return Err(Error::CheckpointFormat("manifest line too long".into()));
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
