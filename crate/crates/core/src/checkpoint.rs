//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "OWFS"  u32 version  u32 count
//! count × { u32 name_len, name, u8 dtype, u32 rank, rank × u64 dim, f64 payload }
//! u32 config_len, config text (UTF-8)
//! ```
//!
//! Entry names: model parameters as registered, batch-norm running
//! statistics (`*.running_mean`, `*.running_var`), normalization
//! statistics under `norm.`, and optimizer state under `optim.`. Scalars
//! are stored with rank 0.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::{NormScope, NormStats};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OWFS";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
}

fn entries(model: &Model, optimizer: Option<&AdamState>) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    out.extend(model.embedder.buffers());
    if model.norm.scope == NormScope::Global {
        out.push(("norm.mean".into(), Tensor::vector(model.norm.mean.clone())));
        out.push(("norm.std".into(), Tensor::vector(model.norm.std.clone())));
    }
    if let Some(opt) = optimizer {
        out.push(("optim.t".into(), Tensor::scalar(opt.t as f64)));
        for (n, t) in &opt.m {
            out.push((format!("optim.m.{n}"), t.clone()));
        }
        for (n, t) in &opt.v {
            out.push((format!("optim.v.{n}"), t.clone()));
        }
    }
    out
}

pub fn to_bytes(model: &Model, optimizer: Option<&AdamState>) -> Vec<u8> {
    let entries = entries(model, optimizer);
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.push(DTYPE_F64);
        b.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    let text = model.config.to_text();
    b.extend_from_slice(&(text.len() as u32).to_le_bytes());
    b.extend_from_slice(text.as_bytes());
    b
}

pub fn save(path: &Path, model: &Model, optimizer: Option<&AdamState>) -> Result<()> {
    fs::write(path, to_bytes(model, optimizer)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.err("truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }
}

/// Parsed container: named tensors in file order plus the config text.
pub fn parse_bytes(bytes: &[u8], path: &Path) -> Result<(Vec<(String, Tensor)>, String)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(r.err("not an OWFS checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.err("entry name is not UTF-8"))?;
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(r.err(format!("entry `{name}` has unknown dtype tag {dtype}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(8).ok_or_else(|| r.err("entry too large"))?)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = if rank == 0 {
            Tensor::scalar(data[0])
        } else {
            Tensor::new(shape, data).map_err(|e| r.err(format!("entry `{name}`: {e}")))?
        };
        out.push((name, t));
    }
    let len = r.u32()? as usize;
    let text = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.err("config text is not UTF-8"))?;
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after config"));
    }
    Ok((out, text))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let (entries, text) = parse_bytes(bytes, path)?;
    let cfg = RunConfig::parse(&text)?;
    let seed = *cfg.seeds.first().ok_or_else(|| Error::config("seeds", "checkpoint config has no seed"))?;
    let placeholder = NormStats {
        scope: cfg.norm_scope,
        mean: Vec::new(),
        std: Vec::new(),
    };
    let mut model = Model::new(&cfg, seed, placeholder)?;
    let mut opt_m = std::collections::BTreeMap::new();
    let mut opt_v = std::collections::BTreeMap::new();
    let mut opt_t = None;
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut seen = std::collections::HashSet::new();
    for (name, t) in entries {
        if !seen.insert(name.clone()) {
            return Err(fmt(format!("duplicate entry `{name}`")));
        }
        if let Some(rest) = name.strip_prefix("optim.") {
            if rest == "t" {
                opt_t = Some(t.item() as u64);
            } else if let Some(p) = rest.strip_prefix("m.") {
                opt_m.insert(p.to_string(), t);
            } else if let Some(p) = rest.strip_prefix("v.") {
                opt_v.insert(p.to_string(), t);
            } else {
                return Err(fmt(format!("unknown optimizer entry `{name}`")));
            }
        } else if name == "norm.mean" {
            model.norm.mean = t.into_data();
        } else if name == "norm.std" {
            model.norm.std = t.into_data();
        } else if name.ends_with(".running_mean") || name.ends_with(".running_var") {
            model.embedder.set_buffer(&name, &t)?;
        } else {
            let slot = model
                .params
                .get_mut(&name)
                .ok_or_else(|| fmt(format!("entry `{name}` does not match the configured model")))?;
            if slot.shape() != t.shape() {
                return Err(fmt(format!(
                    "entry `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
    }
    for name in model.params.names() {
        if !seen.contains(name) {
            return Err(fmt(format!("missing parameter `{name}`")));
        }
    }
    if model.norm.scope == NormScope::Global && model.norm.mean.is_empty() {
        return Err(fmt("missing normalization statistics".into()));
    }
    let optimizer = match opt_t {
        Some(t) => Some(AdamState {
            cfg: AdamConfig {
                lr: cfg.lr,
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: cfg.adam_eps,
            },
            t,
            m: opt_m,
            v: opt_v,
        }),
        None => None,
    };
    Ok(Checkpoint { model, optimizer })
}
