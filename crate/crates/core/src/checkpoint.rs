//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MMAMLCKP"  u32 version  u64 header_len  header (JSON)
//! u64 tensor_count
//! repeated: u32 name_len  name (UTF-8)  u32 ndim  u64 dims[ndim]  f64 data[prod(dims)]
//! ```
//!
//! Tensors are named `member{m}.{param}` for parameters and
//! `member{m}.adam.m.{param}` / `member{m}.adam.v.{param}` for the moments.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::meta::{Model, ModelKind, TrainingConfig};
use crate::nn::Params;

pub const MAGIC: &[u8; 8] = b"MMAMLCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: ModelKind,
    iteration: usize,
    config: TrainingConfig,
    members: Vec<MemberHeader>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemberHeader {
    task_seed: u64,
    adam_step: u64,
    adam_lr: f64,
}

fn named_tensors(model: &Model) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (i, m) in model.members.iter().enumerate() {
        let prefix = format!("member{i}");
        let names = m.params.names(&prefix);
        out.extend(names.iter().cloned().zip(m.params.leaves()));
        let moments = [("m", &m.adam.m), ("v", &m.adam.v)];
        for (tag, ts) in moments {
            out.extend(m.params.names(&format!("{prefix}.adam.{tag}")).into_iter().zip(ts.iter()));
        }
    }
    out
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        kind: model.kind,
        iteration: model.iteration,
        config: model.config.clone(),
        members: model
            .members
            .iter()
            .map(|m| MemberHeader { task_seed: m.task_seed, adam_step: m.adam.step, adam_lr: m.adam.lr })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let tensors = named_tensors(model);
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let header_len = r.len()?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)?;

    let mut tensors = std::collections::HashMap::new();
    for _ in 0..r.len()? {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?.to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).ok_or_else(|| Error::Checkpoint(format!("bad tensor {name}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if !r.bytes.is_empty() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }

    let mut model = Model::init(header.kind, header.config)?;
    if model.members.len() != header.members.len() {
        return Err(Error::Checkpoint(format!("expected {} members, header lists {}", model.members.len(), header.members.len())));
    }
    model.iteration = header.iteration;
    let mut fill = |name: String, slot: &mut Tensor| -> Result<()> {
        let t = tensors.remove(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {:?}", t.shape(), slot.shape())));
        }
        *slot = t;
        Ok(())
    };
    for (i, (m, h)) in model.members.iter_mut().zip(&header.members).enumerate() {
        let prefix = format!("member{i}");
        m.task_seed = h.task_seed;
        m.adam.step = h.adam_step;
        m.adam.lr = h.adam_lr;
        let names = m.params.names(&prefix);
        for (n, slot) in names.iter().zip(m.params.leaves_mut()) {
            fill(n.clone(), slot)?;
        }
        for (tag, store) in [("m", &mut m.adam.m), ("v", &mut m.adam.v)] {
            for (n, slot) in names.iter().zip(store.iter_mut()) {
                fill(format!("{prefix}.adam.{tag}{}", &n[prefix.len()..]), slot)?;
            }
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(model)
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path.file_name().ok_or_else(|| Error::Io(std::io::Error::other("path has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(model)?)
}

pub fn load(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
