//! Binary container shared by checkpoints and frozen-representation caches.
//!
//! Layout:
//!
//! ```text
//! MPTREC1\n                      8 magic bytes
//! <manifest length>\n            ASCII decimal byte count of the manifest
//! <manifest>                     UTF-8 JSON, see below
//! <blob>                         little-endian f64 values, entries back to back
//! ```
//!
//! The manifest is a JSON object with keys in this fixed order:
//!
//! ```text
//! { "format": "MPTREC1",
//!   "meta":    { "<key>": "<string>", ... },            sorted by key
//!   "entries": [ { "name": "...", "shape": [r, c], "trainable": bool,
//!                  "offset": <byte offset into blob>, "len": <f64 count> }, ... ] }
//! ```
//!
//! Writing goes to a temporary sibling file that is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::param::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MPTREC1\n";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    meta: BTreeMap<String, String>,
    entries: Vec<ManifestEntry>,
}

impl Container {
    pub fn from_store(store: &ParamStore, meta: BTreeMap<String, String>) -> Self {
        Container {
            meta,
            entries: store
                .iter()
                .map(|(_, p)| Entry {
                    name: p.name.clone(),
                    tensor: p.value.clone(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Rebuilds a parameter store with entries in file order.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for e in &self.entries {
            store.insert(e.name.clone(), e.tensor.clone(), e.trainable)?;
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            entries.push(ManifestEntry {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                trainable: e.trainable,
                offset,
                len: e.tensor.len(),
            });
            offset += e.tensor.len() * 8;
        }
        let manifest = serde_json::to_vec(&Manifest {
            format: "MPTREC1".into(),
            meta: self.meta.clone(),
            entries,
        })?;
        let mut out = Vec::with_capacity(MAGIC.len() + manifest.len() + 24 + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(format!("{}\n", manifest.len()).as_bytes());
        out.extend_from_slice(&manifest);
        for e in &self.entries {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("missing MPTREC1 magic".into()));
        }
        let rest = &bytes[MAGIC.len()..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing manifest length".into()))?;
        let len: usize = std::str::from_utf8(&rest[..nl])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad manifest length".into()))?;
        let rest = &rest[nl + 1..];
        if rest.len() < len {
            return Err(Error::Format("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&rest[..len])
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        if manifest.format != "MPTREC1" {
            return Err(Error::Format(format!(
                "unknown format tag {}",
                manifest.format
            )));
        }
        let blob = &rest[len..];
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for me in manifest.entries {
            let end = me.offset + me.len * 8;
            if end > blob.len() {
                return Err(Error::Format(format!(
                    "entry {} runs past end of file",
                    me.name
                )));
            }
            let data = blob[me.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(Entry {
                name: me.name,
                tensor: Tensor::new(me.shape, data)?,
                trainable: me.trainable,
            });
        }
        Ok(Container {
            meta: manifest.meta,
            entries,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
