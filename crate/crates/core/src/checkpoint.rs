//! GCKPT container: a `key=value` metadata block plus named GTEN tensors.
//!
//! Layout: `b"GCKPT"`, version `u8` (1), `u32` metadata length, metadata
//! bytes (UTF-8), `u32` entry count, then per entry `u32` name length, name
//! bytes and one GTEN payload. Integers are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use glod_tensor::{read_gten, write_gten, Real, Tensor};
use indexmap::IndexMap;

use crate::error::{GlodError, Result};
use crate::net::GlodConfig;
use crate::params::ParamStore;

pub const GCKPT_MAGIC: &[u8; 5] = b"GCKPT";
pub const GCKPT_VERSION: u8 = 1;

/// Prefix of optimizer state entries.
pub const OPTIM_PREFIX: &str = "optim.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: String,
    pub tensors: IndexMap<String, Tensor<T>>,
}

fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl<T: Real> Checkpoint<T> {
    pub fn new(meta: impl Into<String>) -> Self {
        Self { meta: meta.into(), tensors: IndexMap::new() }
    }

    /// Config text, then `extra` metadata lines; all parameters and buffers.
    pub fn from_model(config: &GlodConfig, store: &ParamStore<T>, extra: &str) -> Self {
        let mut ck = Self::new(format!("{}{}", config.to_text(), extra));
        for (k, v) in store.params().chain(store.buffers()) {
            ck.tensors.insert(k.to_string(), v.clone());
        }
        ck
    }

    pub fn config(&self) -> Result<GlodConfig> {
        GlodConfig::from_text(&self.meta)
    }

    /// Value of a metadata key.
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.lines().find_map(|l| l.split_once('=').filter(|(k, _)| *k == key).map(|(_, v)| v))
    }

    /// Parameters and buffers, skipping optimizer entries.
    pub fn store(&self) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for (k, v) in &self.tensors {
            if k.starts_with(OPTIM_PREFIX) {
                continue;
            }
            if is_buffer(k) {
                store.insert_buffer(k.clone(), v.clone());
            } else {
                store.insert_param(k.clone(), v.clone());
            }
        }
        store
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let io = |e| GlodError::Checkpoint(format!("write failed: {e}"));
        w.write_all(GCKPT_MAGIC).map_err(io)?;
        w.write_all(&[GCKPT_VERSION]).map_err(io)?;
        let len = |n: usize| u32::try_from(n).map_err(|_| GlodError::Checkpoint("entry too large".into()));
        w.write_all(&len(self.meta.len())?.to_le_bytes()).map_err(io)?;
        w.write_all(self.meta.as_bytes()).map_err(io)?;
        w.write_all(&len(self.tensors.len())?.to_le_bytes()).map_err(io)?;
        for (name, t) in &self.tensors {
            w.write_all(&len(name.len())?.to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            write_gten(w, t)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let io = |e: std::io::Error| GlodError::Checkpoint(format!("truncated or unreadable: {e}"));
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic[..5] != GCKPT_MAGIC {
            return Err(GlodError::Checkpoint("bad magic, expected GCKPT".into()));
        }
        if magic[5] != GCKPT_VERSION {
            return Err(GlodError::Checkpoint(format!("unsupported version {}", magic[5])));
        }
        let u32_of = |r: &mut R| -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(io)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let string_of = |r: &mut R, n: usize| -> Result<String> {
            let mut b = vec![0u8; n];
            r.read_exact(&mut b).map_err(io)?;
            String::from_utf8(b).map_err(|_| GlodError::Checkpoint("non UTF-8 text".into()))
        };
        let n = u32_of(r)?;
        let meta = string_of(r, n)?;
        let count = u32_of(r)?;
        let mut tensors = IndexMap::with_capacity(count);
        for _ in 0..count {
            let n = u32_of(r)?;
            let name = string_of(r, n)?;
            let t = read_gten(r)?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(GlodError::Checkpoint(format!("duplicate entry `{name}`")));
            }
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename so an interrupted save never clobbers a good file.
        let tmp = path.with_extension("tmp");
        {
            let f = File::create(&tmp).map_err(|e| GlodError::io(&tmp, e))?;
            let mut w = BufWriter::new(f);
            self.write_to(&mut w)?;
            w.flush().map_err(|e| GlodError::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| GlodError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| GlodError::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}
