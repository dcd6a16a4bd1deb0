//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GMTCKPT1"
//! u64 meta_len, meta_len bytes of JSON metadata
//! u64 tensor_count
//! per tensor: u32 name_len, name, u8 dtype (0 = f64, 1 = u64),
//!             u32 ndim, ndim × u64 dims, payload
//! u32 CRC32 of every preceding byte
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{GmtError, Result};
use crate::model::Model;
use crate::numerics::Matrix;
use crate::training::optimizer::AdamW;
use crate::training::trainer::DataCursor;

pub const MAGIC: &[u8; 8] = b"GMTCKPT1";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_U64: u8 = 1;

macro_rules! ckpt_err {
    ($($arg:tt)*) => { GmtError::Checkpoint(format!($($arg)*)) };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Hash of the model configuration the tensors belong to.
    pub config_hash: String,
    pub run: RunConfig,
    pub step: u64,
    pub total_steps: u64,
    pub best_val: Option<f64>,
    pub rng: ChaCha8Rng,
    pub cursor: DataCursor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
    pub optimizer: AdamW,
}

impl Checkpoint {
    /// Routing temperature the schedule assigns to the saved step.
    pub fn tau(&self) -> f64 {
        let m = &self.model.config;
        crate::training::temperature_schedule(
            self.meta.step,
            self.meta.total_steps,
            m.tau_max,
            m.tau_min,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    fn f64(name: String, shape: Vec<u64>, data: Vec<f64>) -> Self {
        Self {
            name,
            shape,
            data: TensorData::F64(data),
        }
    }

    fn numel(&self) -> usize {
        self.shape.iter().product::<u64>() as usize
    }
}

fn model_tensors(model: &Model, optimizer: &AdamW) -> Vec<Tensor> {
    let mut out = Vec::new();
    for (k, p) in model.params().iter().enumerate() {
        let shape = vec![p.shape.0 as u64, p.shape.1 as u64];
        out.push(Tensor::f64(
            format!("param.{}", p.name),
            shape.clone(),
            p.data.to_vec(),
        ));
        out.push(Tensor::f64(
            format!("adam.m.{}", p.name),
            shape.clone(),
            optimizer.m[k].clone(),
        ));
        out.push(Tensor::f64(
            format!("adam.v.{}", p.name),
            shape,
            optimizer.v[k].clone(),
        ));
    }
    for (l, block) in model.blocks.iter().enumerate() {
        if let Some(cell) = block.memory() {
            let f = cell.bank.slots() as u64;
            out.push(Tensor::f64(
                format!("memory.{l}.usage"),
                vec![f],
                cell.bank.usage.clone(),
            ));
            out.push(Tensor {
                name: format!("memory.{l}.age"),
                shape: vec![f],
                data: TensorData::U64(cell.bank.age.clone()),
            });
        }
    }
    out
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let meta = serde_json::to_vec(&ckpt.meta)?;
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    let tensors = model_tensors(&ckpt.model, &ckpt.optimizer);
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in &tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        let tag = match t.data {
            TensorData::F64(_) => DTYPE_F64,
            TensorData::U64(_) => DTYPE_U64,
        };
        buf.push(tag);
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        match &t.data {
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::U64(v) => v
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ckpt_err!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| ckpt_err!("implausible length {n}"))
    }
}

fn read_tensor(r: &mut Reader) -> Result<Tensor> {
    let name_len = r.u32()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| ckpt_err!("tensor name is not UTF-8"))?;
    let tag = r.u8()?;
    let ndim = r.u32()? as usize;
    let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let numel = shape
        .iter()
        .try_fold(1u64, |a, &d| a.checked_mul(d))
        .and_then(|n| usize::try_from(n).ok())
        .filter(|&n| n <= r.bytes.len() / 8)
        .ok_or_else(|| ckpt_err!("tensor {name} has implausible shape {shape:?}"))?;
    let payload = r.take(numel * 8)?;
    let words = payload
        .chunks_exact(8)
        .map(|c| c.try_into().expect("8 bytes"));
    let data = match tag {
        DTYPE_F64 => TensorData::F64(words.map(f64::from_le_bytes).collect()),
        DTYPE_U64 => TensorData::U64(words.map(u64::from_le_bytes).collect()),
        other => return Err(ckpt_err!("tensor {name} has unknown dtype tag {other}")),
    };
    Ok(Tensor { name, shape, data })
}

fn take_f64(map: &mut HashMap<String, Tensor>, name: &str, numel: usize) -> Result<Vec<f64>> {
    let t = map
        .remove(name)
        .ok_or_else(|| ckpt_err!("missing tensor {name}"))?;
    if t.numel() != numel {
        return Err(ckpt_err!(
            "tensor {name} has {} entries, expected {numel}",
            t.numel()
        ));
    }
    match t.data {
        TensorData::F64(v) => Ok(v),
        TensorData::U64(_) => Err(ckpt_err!("tensor {name} should be f64")),
    }
}

/// Parses checkpoint bytes. With `expected_hash` set, a checkpoint of any
/// other model configuration is rejected before any tensor is used.
pub fn decode_checkpoint(bytes: &[u8], expected_hash: Option<&str>) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ckpt_err!("not a checkpoint file (bad magic)"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(ckpt_err!("checksum mismatch (file corrupt or truncated)"));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let meta_len = r.len()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| ckpt_err!("bad metadata: {e}"))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(ckpt_err!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            meta.format_version
        ));
    }
    let own_hash = meta.run.model.config_hash();
    if own_hash != meta.config_hash {
        return Err(ckpt_err!(
            "metadata config hash does not match its model config"
        ));
    }
    if let Some(expected) = expected_hash {
        if expected != meta.config_hash {
            return Err(ckpt_err!(
                "config hash mismatch: checkpoint {}, expected {expected}",
                meta.config_hash
            ));
        }
    }
    let count = r.len()?;
    let mut map = HashMap::with_capacity(count);
    for _ in 0..count {
        let t = read_tensor(&mut r)?;
        if map.insert(t.name.clone(), t).is_some() {
            return Err(ckpt_err!("duplicate tensor name"));
        }
    }
    if r.pos != body.len() {
        return Err(ckpt_err!("{} trailing bytes", body.len() - r.pos));
    }

    let mut model = Model::new(meta.run.model.clone(), 0)?;
    let mut optimizer = AdamW::new(&model);
    optimizer.t = meta.step;
    let mut values = Vec::new();
    for (k, p) in model.params().iter().enumerate() {
        let n = p.data.len();
        values.push(Matrix::from_vec(
            p.shape.0,
            p.shape.1,
            take_f64(&mut map, &format!("param.{}", p.name), n)?,
        )?);
        optimizer.m[k] = take_f64(&mut map, &format!("adam.m.{}", p.name), n)?;
        optimizer.v[k] = take_f64(&mut map, &format!("adam.v.{}", p.name), n)?;
    }
    model.set_param_matrices(&values)?;
    for (l, block) in model.blocks.iter_mut().enumerate() {
        if let Some(cell) = block.memory_mut() {
            let f = cell.bank.slots();
            cell.bank.usage = take_f64(&mut map, &format!("memory.{l}.usage"), f)?;
            let name = format!("memory.{l}.age");
            let t = map
                .remove(&name)
                .ok_or_else(|| ckpt_err!("missing tensor {name}"))?;
            cell.bank.age = match t.data {
                TensorData::U64(v) if v.len() == f => v,
                _ => return Err(ckpt_err!("tensor {name} should hold {f} u64 entries")),
            };
        }
    }
    if let Some(extra) = map.keys().next() {
        return Err(ckpt_err!("unexpected tensor {extra}"));
    }
    Ok(Checkpoint {
        meta,
        model,
        optimizer,
    })
}

pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes, expected_hash)
}
