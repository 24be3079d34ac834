//! Checkpoint files: a text header with the model config and metadata,
//! binary tensor records, and a trailing SHA-256 of everything before it.
//!
//! ```text
//! GAPECKPT
//! version=1
//! <key>=<value>        (config, then metadata prefixed `meta.`)
//! end
//! u32 entry count
//! per entry: u32 name length, name, u8 dtype (1 = f64), u32 rank, u64 dims, f64 data
//! 32-byte SHA-256
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Metadata, ModelConfig, Param, ParamStore};
use crate::attention::GateSource;
use crate::posenc::EncodingKind;
use crate::{Error, Result};

pub const MAGIC: &str = "GAPECKPT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

fn config_lines(cfg: &ModelConfig) -> Vec<(String, String)> {
    let mut kv = vec![
        ("n_layer".to_string(), cfg.n_layer.to_string()),
        ("n_head".into(), cfg.n_head.to_string()),
        ("d_model".into(), cfg.d_model.to_string()),
        ("vocab_size".into(), cfg.vocab_size.to_string()),
        ("pe".into(), cfg.kind.tag().to_string()),
    ];
    match &cfg.kind {
        EncodingKind::NoPE => {}
        EncodingKind::RoPE { base } => kv.push(("rope_base".into(), base.to_string())),
        EncodingKind::PRoPE { base, fraction } => {
            kv.push(("rope_base".into(), base.to_string()));
            kv.push(("prope_fraction".into(), fraction.to_string()));
        }
        EncodingKind::ALiBi { slopes } => {
            let s: Vec<String> = slopes.iter().map(f64::to_string).collect();
            kv.push(("alibi_slopes".into(), s.join(",")));
        }
    }
    kv.push(("gape".into(), cfg.gape.to_string()));
    kv.push(("qk_dim".into(), cfg.qk_dim.to_string()));
    kv.push(("t_train".into(), cfg.t_train.to_string()));
    kv.push(("dropout".into(), cfg.dropout.to_string()));
    kv.push(("gate_source".into(), cfg.gate_source.tag().to_string()));
    kv
}

fn parse_config(kv: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let get = |k: &str| kv.get(k).ok_or_else(|| Error::Checkpoint(format!("header lacks `{k}`")));
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad value for `{k}`")))
    };
    let real = |k: &str| -> Result<f64> {
        get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad value for `{k}`")))
    };
    let kind = match get("pe")?.as_str() {
        "nope" => EncodingKind::NoPE,
        "rope" => EncodingKind::RoPE { base: real("rope_base")? },
        "prope" => EncodingKind::PRoPE { base: real("rope_base")?, fraction: real("prope_fraction")? },
        "alibi" => EncodingKind::ALiBi {
            slopes: get("alibi_slopes")?
                .split(',')
                .map(|s| s.parse().map_err(|_| Error::Checkpoint("bad ALiBi slope".into())))
                .collect::<Result<_>>()?,
        },
        other => return Err(Error::Checkpoint(format!("unknown encoding `{other}`"))),
    };
    let gape = match get("gape")?.as_str() {
        "true" => true,
        "false" => false,
        other => return Err(Error::Checkpoint(format!("bad gape flag `{other}`"))),
    };
    let cfg = ModelConfig {
        n_layer: num("n_layer")?,
        n_head: num("n_head")?,
        d_model: num("d_model")?,
        vocab_size: num("vocab_size")?,
        kind,
        gape,
        qk_dim: num("qk_dim")?,
        t_train: num("t_train")?,
        dropout: real("dropout")?,
        gate_source: GateSource::parse(get("gate_source")?)?,
    };
    cfg.validate().map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;
    Ok(cfg)
}

pub fn to_bytes(cfg: &ModelConfig, params: &ParamStore, meta: &Metadata) -> Result<Vec<u8>> {
    params.check_config(cfg)?;
    let mut out = Vec::new();
    let mut header = format!("{MAGIC}\nversion={VERSION}\n");
    for (k, v) in config_lines(cfg) {
        header.push_str(&format!("{k}={v}\n"));
    }
    for (k, v) in meta {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Checkpoint(format!("metadata `{k}` cannot be stored")));
        }
        header.push_str(&format!("meta.{k}={v}\n"));
    }
    header.push_str("end\n");
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(params.params.len() as u32).to_le_bytes());
    for p in &params.params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &p.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated tensor data".into()));
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

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelConfig, ParamStore, Metadata)> {
    if bytes.len() < 32 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let end = body
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| Error::Checkpoint("header has no `end` line".into()))?;
    let header = std::str::from_utf8(&body[..end]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    match lines.next() {
        Some(v) if v == format!("version={VERSION}") => {}
        other => return Err(Error::Checkpoint(format!("unsupported version line {other:?}"))),
    }
    let mut kv = BTreeMap::new();
    let mut meta = Metadata::new();
    for line in lines {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Checkpoint(format!("bad header line `{line}`")))?;
        match k.strip_prefix("meta.") {
            Some(mk) => meta.insert(mk.to_string(), v.to_string()),
            None => kv.insert(k.to_string(), v.to_string()),
        };
    }
    let cfg = parse_config(&kv)?;

    let mut r = Reader { buf: body, pos: end + 5 };
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        if r.take(1)?[0] != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("entry `{name}` has an unknown dtype")));
        }
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.push(Param { name, shape, data, requires_grad: true });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    let store = ParamStore { params };
    store.check_config(&cfg)?;
    Ok((cfg, store, meta))
}

pub fn save(path: &Path, cfg: &ModelConfig, params: &ParamStore, meta: &Metadata) -> Result<()> {
    std::fs::write(path, to_bytes(cfg, params, meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelConfig, ParamStore, Metadata)> {
    from_bytes(&std::fs::read(path)?)
}

/// Loads and additionally requires the stored config to equal `expected`.
pub fn load_into(path: &Path, expected: &ModelConfig) -> Result<(ParamStore, Metadata)> {
    let (cfg, params, meta) = load(path)?;
    params.check_config(expected)?;
    if &cfg != expected {
        return Err(Error::Checkpoint(format!("stored config {cfg:?} differs from {expected:?}")));
    }
    Ok((params, meta))
}
