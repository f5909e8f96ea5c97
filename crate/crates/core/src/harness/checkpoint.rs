//! Named-tensor checkpoint container.
//!
//! ```text
//! "CPFT" | u32 version | u32 kind | [u8; 32] config hash | u32 count
//! count x ( u16 name_len | name | u8 rank | u32 dims[rank] | f64 data[] )
//! ```
//!
//! All integers and floats are little-endian. A JSON sidecar `<path>.json`
//! carries the [`CheckpointMeta`] so a checkpoint can be used on its own.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peft::{FreezeMask, Method};
use crate::pipeline::ModelConfig;
use crate::{Registry, TensorF};

pub const MAGIC: &[u8; 4] = b"CPFT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Full,
    Delta,
}

impl CheckpointKind {
    fn code(self) -> u32 {
        match self {
            CheckpointKind::Full => 0,
            CheckpointKind::Delta => 1,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(CheckpointKind::Full),
            1 => Ok(CheckpointKind::Delta),
            _ => Err(Error::Checkpoint(format!("unknown kind {c}"))),
        }
    }
}

/// Decoded checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config_hash: [u8; 32],
    pub tensors: Vec<(String, TensorF)>,
}

impl Checkpoint {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.kind.code().to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&u32_of(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank of `{name}` too large")))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        take(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = CheckpointKind::from_code(read_u32(&mut r)?)?;
        let mut config_hash = [0u8; 32];
        take(&mut r, &mut config_hash)?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            take(&mut r, &mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            take(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            take(&mut r, &mut rank)?;
            let shape = (0..rank[0]).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            if numel.saturating_mul(8) > r.len() {
                return Err(Error::Checkpoint(format!("truncated data for `{name}`")));
            }
            let data = r[..numel * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            r = &r[numel * 8..];
            tensors.push((name, TensorF::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { kind, config_hash, tensors })
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} exceeds u32")))
}

fn take(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    take(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Snapshot of `reg`: every tensor for a full checkpoint, the mask names for a delta.
pub fn snapshot(reg: &Registry, kind: CheckpointKind, mask: Option<&FreezeMask>, cfg: &ModelConfig) -> Result<Checkpoint> {
    let tensors = match kind {
        CheckpointKind::Full => reg.iter().map(|(n, e)| (n.to_string(), e.value.clone())).collect(),
        CheckpointKind::Delta => {
            let mask = mask.filter(|m| !m.is_empty()).ok_or_else(|| {
                Error::Checkpoint("a delta checkpoint needs a non-empty freeze mask".into())
            })?;
            mask.names().iter().map(|n| Ok((n.clone(), reg.get(n)?.clone()))).collect::<Result<_>>()?
        }
    };
    Ok(Checkpoint { kind, config_hash: cfg.hash(), tensors })
}

/// Writes values from `ckpt` into `reg`.
///
/// A full checkpoint must name exactly the registry's parameters; a delta
/// may name any subset. Both are rejected when the config hash differs.
pub fn restore(ckpt: &Checkpoint, reg: &mut Registry, cfg: &ModelConfig) -> Result<()> {
    if ckpt.config_hash != cfg.hash() {
        return Err(Error::Checkpoint("model config hash mismatch".into()));
    }
    for (name, t) in &ckpt.tensors {
        let cur = reg.get(name)?;
        if cur.shape() != t.shape() {
            return Err(Error::shape("load_checkpoint", format!("`{name}` is {:?}, stored {:?}", cur.shape(), t.shape())));
        }
    }
    if ckpt.kind == CheckpointKind::Full {
        if let Some(missing) = reg.names().find(|n| !ckpt.names().any(|c| c == *n)) {
            return Err(Error::Checkpoint(format!("full checkpoint lacks `{missing}`")));
        }
        if ckpt.tensors.len() != reg.len() {
            return Err(Error::Checkpoint("full checkpoint repeats a tensor name".into()));
        }
    }
    for (name, t) in &ckpt.tensors {
        reg.set_value(name, t.clone())?;
    }
    Ok(())
}

/// What produced a checkpoint; stored next to it as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(
    reg: &Registry,
    kind: CheckpointKind,
    mask: Option<&FreezeMask>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let bytes = snapshot(reg, kind, mask, &meta.model)?.to_bytes()?;
    fs::File::create(path)?.write_all(&bytes)?;
    let mut json = serde_json::to_string_pretty(meta)?;
    json.push('\n');
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side)
        .map_err(|e| Error::Checkpoint(format!("cannot read sidecar {}: {e}", side.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_checkpoint(path: &Path, reg: &mut Registry, cfg: &ModelConfig) -> Result<CheckpointKind> {
    let ckpt = read_checkpoint(path)?;
    restore(&ckpt, reg, cfg)?;
    Ok(ckpt.kind)
}
