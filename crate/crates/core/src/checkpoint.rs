//! Binary checkpoints for detectors and policies.
//!
//! ```text
//! magic "ENVCKPT\0" | version u32
//! header_len u32 | header JSON {kind, config, norm_stats}
//! count u32 | count x (name_len u32, name, dtype u8, ndim u32, dims u64..., payload)
//! sha256 of everything above (32 bytes)
//! ```
//!
//! All integers and payloads are little-endian; dtype 0 is `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use edgenav_autodiff::ParamStore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{build_model, DetectorModel, ModelConfig, NormStats};
use crate::error::{Error, Result};
use crate::ppo::PolicyNet;

pub const MAGIC: &[u8; 8] = b"ENVCKPT\0";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    norm_stats: Option<NormStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub norm_stats: Option<NormStats>,
    pub params: ParamStore,
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        kind: ck.kind.clone(),
        config: ck.config.clone(),
        norm_stats: ck.norm_stats,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(64 + header.len() + ck.params.num_params() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(ck.params.len() as u32).to_le_bytes());
    for p in ck.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn bad(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.bad("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch (truncated or corrupted file)"));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
        path,
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.bad(format!("format version {version} is not supported (expected {VERSION})")));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| r.bad(format!("header: {e}")))?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| r.bad("tensor name is not UTF-8"))?.to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(r.bad(format!("tensor `{name}` has unsupported dtype {dtype}")));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.bad("tensor too large"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.insert(name, &shape, data).map_err(|e| r.bad(e.to_string()))?;
    }
    if r.pos != body.len() {
        return Err(r.bad("trailing bytes after tensors"));
    }
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        norm_stats: header.norm_stats,
        params,
    })
}

/// Writes next to `path` and renames, so readers never see a partial file.
pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let mut tmp: PathBuf = path.to_path_buf().into_os_string().into();
    tmp.as_mut_os_string().push(".partial");
    fs::write(&tmp, encode(ck)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub const DETECTOR_KIND: &str = "detector";
pub const POLICY_KIND: &str = "policy";

pub fn detector_checkpoint(model: &DetectorModel) -> Checkpoint {
    Checkpoint {
        kind: DETECTOR_KIND.into(),
        config: serde_json::to_value(&model.cfg).expect("config serializes"),
        norm_stats: Some(model.norm_stats),
        params: model.store.clone(),
    }
}

pub fn save_checkpoint(model: &DetectorModel, path: &Path) -> Result<()> {
    write_checkpoint(&detector_checkpoint(model), path)
}

fn expect_kind(ck: &Checkpoint, kind: &str, path: &Path) -> Result<()> {
    if ck.kind != kind {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            msg: format!("holds a {}, expected a {kind}", ck.kind),
        });
    }
    Ok(())
}

/// Rebuilds a detector; every parameter must match the configured layout.
pub fn load_checkpoint(path: &Path) -> Result<DetectorModel> {
    let ck = read_checkpoint(path)?;
    expect_kind(&ck, DETECTOR_KIND, path)?;
    let bad = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let cfg: ModelConfig = serde_json::from_value(ck.config).map_err(|e| bad(format!("config: {e}")))?;
    let mut model = build_model(&cfg, 0)?;
    let layout: Vec<(String, Vec<usize>)> = model.store.iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
    let stored: Vec<(String, Vec<usize>)> = ck.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
    if layout != stored {
        return Err(bad("parameters do not match the stored model configuration".into()));
    }
    model.store = ck.params;
    model.norm_stats = ck.norm_stats.unwrap_or_default();
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct PolicyHeader {
    hidden: usize,
}

pub fn save_policy(net: &PolicyNet, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        kind: POLICY_KIND.into(),
        config: serde_json::to_value(PolicyHeader { hidden: net.hidden }).expect("serializes"),
        norm_stats: None,
        params: net.store.clone(),
    };
    write_checkpoint(&ck, path)
}

pub fn load_policy(path: &Path) -> Result<PolicyNet> {
    let ck = read_checkpoint(path)?;
    expect_kind(&ck, POLICY_KIND, path)?;
    let h: PolicyHeader = serde_json::from_value(ck.config).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: format!("config: {e}"),
    })?;
    PolicyNet::from_store(h.hidden, ck.params)
}
