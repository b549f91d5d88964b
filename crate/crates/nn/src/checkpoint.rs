//! Binary checkpoints: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header, then every parameter as raw little-endian `f32` values in
//! declaration order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, ParamSet, Result, Tensor};

const MAGIC: &[u8; 8] = b"USSLCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: serde_json::Value,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    /// Splits the flat tensor list back into groups sized like `sets`.
    pub fn restore_into(self, sets: &mut [&mut ParamSet<f32>]) -> Result<()> {
        let mut it = self.tensors.into_iter();
        for set in sets.iter_mut() {
            let chunk: Vec<_> = it.by_ref().take(set.len()).collect();
            set.load_values(chunk)?;
        }
        if it.next().is_some() {
            return Err(Error::Checkpoint("checkpoint has more tensors than the model".into()));
        }
        Ok(())
    }
}

pub fn save_checkpoint(
    path: &Path,
    config: serde_json::Value,
    step: u64,
    sets: &[&ParamSet<f32>],
) -> Result<()> {
    let tensors = sets
        .iter()
        .flat_map(|s| s.iter())
        .map(|p| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
        .collect();
    let header = CheckpointHeader { config, step, tensors };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in sets.iter().flat_map(|s| s.iter()) {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::new(&entry.shape, data)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint { header, tensors })
}
