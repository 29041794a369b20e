//! Versioned binary checkpoints for parameter stores and optimizer state.
//!
//! Layout: 4-byte magic, u32 format version, u64 header length, a JSON
//! header (model kind, dtype, config hash + config echo, step, parameter
//! and optimizer inventories), then raw little-endian f64 payloads in
//! header order. Values are widened to f64 on disk regardless of the store's
//! scalar type, which round-trips f32 and f64 stores bit-exactly. Writes go
//! through a temp file and rename, so an interrupted save never clobbers the
//! previous checkpoint.

use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};
use crate::tensor::Scalar;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"SBCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    entries: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: String,
    dtype: String,
    /// Hex so the u64 survives JSON readers that parse numbers as doubles.
    config_hash: String,
    config: serde_json::Value,
    step: u64,
    params: Vec<ParamEntry>,
    optimizer: Option<OptimizerHeader>,
}

/// Identity of a checkpoint, available without touching the payload.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub model: String,
    pub dtype: String,
    pub config_hash: u64,
    pub config: serde_json::Value,
    pub step: u64,
}

fn push_array<F: Scalar>(bytes: &mut Vec<u8>, a: &ArrayD<F>) {
    for v in a.iter() {
        bytes.extend_from_slice(&Scalar::to_f64(*v).to_le_bytes());
    }
}

fn take_array<F: Scalar>(bytes: &[u8], pos: &mut usize, shape: &[usize]) -> Result<ArrayD<F>> {
    let n: usize = shape.iter().product();
    let end = *pos + 8 * n;
    if end > bytes.len() {
        return Err(Error::Checkpoint(format!(
            "payload truncated: need {end} bytes, have {}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let at = *pos + 8 * i;
        let raw: [u8; 8] = bytes[at..at + 8].try_into().unwrap();
        data.push(F::from_f64(f64::from_le_bytes(raw)));
    }
    *pos = end;
    ArrayD::from_shape_vec(IxDyn(shape), data)
        .map_err(|e| Error::Checkpoint(format!("bad parameter shape {shape:?}: {e}")))
}

/// Writes `store` (and optionally optimizer moments) to `path`.
/// `config` is echoed into the header for later inspection; `config_hash`
/// ties the checkpoint to the run configuration that produced it.
pub fn save_checkpoint<F: Scalar, C: Serialize>(
    path: &Path,
    model: &str,
    config: &C,
    config_hash: u64,
    step: u64,
    store: &ParamStore<F>,
    optimizer: Option<&Adam<F>>,
) -> Result<()> {
    let params: Vec<ParamEntry> = store
        .iter()
        .map(|(name, p)| ParamEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            frozen: p.frozen,
        })
        .collect();
    let opt_header = optimizer.map(|adam| OptimizerHeader {
        lr: adam.lr,
        beta1: adam.beta1,
        beta2: adam.beta2,
        eps: adam.eps,
        t: adam.t,
        entries: adam
            .state()
            .map(|(name, (m, _))| ParamEntry {
                name: name.clone(),
                shape: m.shape().to_vec(),
                frozen: false,
            })
            .collect(),
    });
    let header = Header {
        model: model.to_string(),
        dtype: F::DTYPE.to_string(),
        config_hash: format!("{config_hash:016x}"),
        config: serde_json::to_value(config)?,
        step,
        params,
        optimizer: opt_header,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    for (_, p) in store.iter() {
        push_array(&mut bytes, &p.value);
    }
    if let Some(adam) = optimizer {
        for (_, (m, v)) in adam.state() {
            push_array(&mut bytes, m);
            push_array(&mut bytes, v);
        }
    }

    let tmp = path.with_extension("tmp");
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("file shorter than the fixed header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:02x?}, expected {MAGIC:02x?}",
            &bytes[0..4]
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("header length exceeds file size".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| Error::Checkpoint(format!("header is not valid JSON: {e}")))?;
    Ok((header, end))
}

fn meta_of(header: &Header) -> Result<CheckpointMeta> {
    let config_hash = u64::from_str_radix(&header.config_hash, 16)
        .map_err(|e| Error::Checkpoint(format!("config hash {:?}: {e}", header.config_hash)))?;
    Ok(CheckpointMeta {
        model: header.model.clone(),
        dtype: header.dtype.clone(),
        config_hash,
        config: header.config.clone(),
        step: header.step,
    })
}

/// Reads only the metadata; payload is not decoded.
pub fn peek_checkpoint(path: &Path) -> Result<CheckpointMeta> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, _) = parse_header(&bytes)?;
    meta_of(&header)
}

/// Reads a full checkpoint back. The stored dtype must match `F`; silent
/// precision changes are refused.
pub fn load_checkpoint<F: Scalar>(
    path: &Path,
) -> Result<(CheckpointMeta, ParamStore<F>, Option<Adam<F>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, mut pos) = parse_header(&bytes)?;
    if header.dtype != F::DTYPE {
        return Err(Error::Checkpoint(format!(
            "stored dtype {} but loading as {}",
            header.dtype,
            F::DTYPE
        )));
    }
    let meta = meta_of(&header)?;
    let mut store = ParamStore::new();
    for e in &header.params {
        let a = take_array::<F>(&bytes, &mut pos, &e.shape)?;
        store.insert(&e.name, a, e.frozen);
    }
    let optimizer = match &header.optimizer {
        None => None,
        Some(oh) => {
            let mut adam = Adam::<F>::new(oh.lr);
            adam.beta1 = oh.beta1;
            adam.beta2 = oh.beta2;
            adam.eps = oh.eps;
            adam.t = oh.t;
            for e in &oh.entries {
                let m = take_array::<F>(&bytes, &mut pos, &e.shape)?;
                let v = take_array::<F>(&bytes, &mut pos, &e.shape)?;
                adam.restore_state(&e.name, m, v);
            }
            Some(adam)
        }
    };
    if pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after payload",
            bytes.len() - pos
        )));
    }
    Ok((meta, store, optimizer))
}
