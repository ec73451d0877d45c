//! Binary checkpoints of named tensors.
//!
//! Layout (little endian):
//!
//! ```text
//! magic  b"SKDCKPT1"
//! u64    step
//! str    config hash            (str = u32 byte length + utf-8)
//! u32    metadata entry count, then { str key, str value } each
//! u64    tensor count, then per tensor:
//!        str name, u32 rank, rank x u64 dims, f64 values
//! ```
//!
//! Backbone parameters keep their own names; the EMA shadow is stored
//! under `ema.`, optimizer moments under `opt.m.` and `opt.v.`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::backbone::{Backbone, BackboneConfig, ParamMap, TokenDesign};
use crate::config::Hyperparameters;
use crate::distill::ByteReader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SKDCKPT1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: ParamMap,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut ByteReader) -> Result<String> {
    let n = r.u32()? as usize;
    String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not utf-8".into()))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut out, &self.config_hash);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let step = r.u64()?;
        let config_hash = get_str(&mut r)?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = get_str(&mut r)?;
            meta.insert(k, get_str(&mut r)?);
        }
        let mut tensors = ParamMap::new();
        for _ in 0..r.u64()? {
            let name = get_str(&mut r)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            step,
            config_hash,
            meta,
            tensors,
        })
    }

    /// Written to a temporary sibling and renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Tensors under `prefix`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> ParamMap {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    /// Model parameters (names starting with `backbone.`).
    pub fn model_params(&self) -> ParamMap {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with("backbone."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn hyperparameters(&self) -> Result<Hyperparameters> {
        let text = self
            .meta
            .get("config")
            .ok_or_else(|| Error::Checkpoint("no config stored".into()))?;
        let hp = Hyperparameters::from_config_str(text)?;
        if hp.config_hash() != self.config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash {} does not match stored config ({})",
                self.config_hash,
                hp.config_hash()
            )));
        }
        Ok(hp)
    }

    pub fn token_design(&self) -> Result<TokenDesign> {
        match self.meta.get("token").map(String::as_str) {
            Some(s) => parse_token_design(s),
            None => Err(Error::Checkpoint("no token design stored".into())),
        }
    }

    /// Rebuild the backbone; `use_ema` selects the shadow weights.
    pub fn backbone(&self, use_ema: bool) -> Result<Backbone> {
        let hp = self.hyperparameters()?;
        let cfg = BackboneConfig::from_hyperparameters(&hp, self.token_design()?)?;
        let params = if use_ema {
            let shadow = self.section("ema.");
            if shadow.is_empty() {
                return Err(Error::Checkpoint("checkpoint has no EMA weights".into()));
            }
            shadow
        } else {
            self.model_params()
        };
        Backbone::from_params(cfg, params)
    }
}

pub fn token_design_name(t: TokenDesign) -> &'static str {
    match t {
        TokenDesign::Shared => "A",
        TokenDesign::LastLevel => "B",
        TokenDesign::EveryLevel => "ours",
    }
}

pub fn parse_token_design(s: &str) -> Result<TokenDesign> {
    match s {
        "A" | "shared" => Ok(TokenDesign::Shared),
        "B" | "last" => Ok(TokenDesign::LastLevel),
        "ours" | "every" => Ok(TokenDesign::EveryLevel),
        other => Err(Error::InvalidArgument(format!("unknown token design `{other}`"))),
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
