//! Flat named-tensor checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"TDRIFTCK"   magic, 8 bytes
//! u32           format version (1)
//! u64           header length in bytes
//! [u8]          JSON header: config, expansions, tensor directory
//! [f64]         tensor values, row-major, in directory order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdapterSpec, LoraSpec, ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"TDRIFTCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    is_bias: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    lora: Option<LoraSpec>,
    adapter: Option<AdapterSpec>,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<W: Write>(model: &ModelState, mut out: W) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        lora: model.lora.clone(),
        adapter: model.adapter.clone(),
        tensors: model
            .params
            .iter()
            .map(|(name, p)| TensorEntry {
                name: name.to_string(),
                shape: p.tensor.shape().to_vec(),
                trainable: p.trainable,
                is_bias: p.is_bias,
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for (_, p) in model.params.iter() {
        for v in p.tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ModelState> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; len];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;

    let mut params = ParamSet::new();
    let mut buf = [0u8; 8];
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            input.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        params.insert(
            &entry.name,
            Tensor::from_vec(&entry.shape, data)?,
            entry.trainable,
            entry.is_bias,
        );
    }
    if input.read(&mut buf)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    ModelState::from_parts(header.config, params, header.lora, header.adapter)
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp)?;
        write_checkpoint(model, BufWriter::new(file))?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
