//! `DCVT` tensor container.
//!
//! Layout: the magic bytes `DCVT`, a little-endian `u32` version (1), a
//! little-endian `u64` header length, a UTF-8 JSON header, then the raw
//! little-endian tensor data. The header maps each tensor name to
//! `{"shape", "dtype", "offset"}` with `offset` counted from the start of the
//! data section. The reserved key `__metadata__` holds free-form JSON; for
//! models it carries the configuration under `"config"`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::config::ModelConfig;
use super::model::DcVitModel;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"DCVT";
pub const VERSION: u32 = 1;
const METADATA_KEY: &str = "__metadata__";
const MAX_HEADER: u64 = 64 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    shape: Vec<usize>,
    dtype: Dtype,
    offset: u64,
}

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub metadata: Value,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn write_container<'a, W: Write>(
    mut w: W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    metadata: &Value,
    dtype: Dtype,
) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut header = Map::new();
    header.insert(METADATA_KEY.into(), metadata.clone());
    let mut offset = 0u64;
    for &(name, t) in &tensors {
        if name == METADATA_KEY {
            return Err(Error::Format(format!("tensor name {METADATA_KEY} is reserved")));
        }
        let entry = Entry {
            shape: t.shape().to_vec(),
            dtype,
            offset,
        };
        if header.insert(name.into(), serde_json::to_value(entry)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        offset += (t.len() * dtype.size()) as u64;
    }
    let header = serde_json::to_vec(&Value::Object(header))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, t) in tensors {
        for &x in t.data() {
            match dtype {
                Dtype::F32 => w.write_all(&(x as f32).to_le_bytes())?,
                Dtype::F64 => w.write_all(&x.to_le_bytes())?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated file while reading {what}")),
        _ => Error::Io(e),
    })
}

pub fn read_container<R: Read>(mut r: R) -> Result<Container> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut word = [0u8; 4];
    read_exact(&mut r, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    read_exact(&mut r, &mut len, "header length")?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(Error::Format(format!("header length {len} is implausible")));
    }
    let mut header = vec![0u8; len as usize];
    read_exact(&mut r, &mut header, "header")?;
    let header: Map<String, Value> =
        serde_json::from_slice(&header).map_err(|e| Error::Format(format!("malformed header: {e}")))?;
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;

    let mut metadata = Value::Null;
    let mut tensors = BTreeMap::new();
    for (name, value) in header {
        if name == METADATA_KEY {
            metadata = value;
            continue;
        }
        let entry: Entry =
            serde_json::from_value(value).map_err(|e| Error::Format(format!("bad entry for {name}: {e}")))?;
        let numel: usize = entry.shape.iter().product();
        let size = entry.dtype.size();
        let start = usize::try_from(entry.offset).map_err(|_| Error::Format(format!("offset of {name} too large")))?;
        let end = numel
            .checked_mul(size)
            .and_then(|n| n.checked_add(start))
            .filter(|&end| end <= data.len())
            .ok_or_else(|| Error::Format(format!("tensor {name} extends past the end of the data")))?;
        let bytes = &data[start..end];
        let values: Vec<f64> = match entry.dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        };
        let t = Tensor::new(entry.shape, values).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        if !t.is_finite() {
            return Err(Error::Format(format!("tensor {name} holds non-finite values")));
        }
        tensors.insert(name, t);
    }
    Ok(Container { metadata, tensors })
}

pub fn save_container(
    path: impl AsRef<Path>,
    tensors: &[(&str, &Tensor)],
    metadata: &Value,
    dtype: Dtype,
) -> Result<()> {
    let file = File::create(path)?;
    write_container(BufWriter::new(file), tensors.iter().copied(), metadata, dtype)
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Container> {
    read_container(BufReader::new(File::open(path)?))
}

/// Writes a model with `f32` tensors and its configuration as metadata.
pub fn write_model<W: Write>(w: W, model: &DcVitModel) -> Result<()> {
    let meta = serde_json::json!({ "config": model.config });
    let named = model.named_tensors();
    write_container(w, named.iter().map(|(n, t)| (n.as_str(), *t)), &meta, Dtype::F32)
}

pub fn read_model<R: Read>(r: R) -> Result<DcVitModel> {
    let c = read_container(r)?;
    let config = c
        .metadata
        .get("config")
        .ok_or_else(|| Error::Format("missing model config in metadata".into()))?;
    let config: ModelConfig =
        serde_json::from_value(config.clone()).map_err(|e| Error::Format(format!("bad model config: {e}")))?;
    config.validate().map_err(|e| Error::Format(e.to_string()))?;
    DcVitModel::from_named(config, c.tensors)
}

pub fn save_model(path: impl AsRef<Path>, model: &DcVitModel) -> Result<()> {
    write_model(BufWriter::new(File::create(path)?), model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DcVitModel> {
    read_model(BufReader::new(File::open(path)?))
}
