//! Checkpoint files.
//!
//! Layout: `b"FMCK"`, `u8` version, `u32` (little-endian) manifest length,
//! the UTF-8 JSON manifest, then every tensor as little-endian `f32`
//! values. Manifest `offset`/`len` are byte positions relative to the start
//! of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMCK";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Prefix of non-parameter tensors (optimizer slots) in the manifest.
const EXTRA_PREFIX: &str = "extra/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Parameters<f32>,
    pub step: u64,
    pub seed: u64,
    /// Auxiliary state such as optimizer buffers.
    pub extra: BTreeMap<String, Tensor<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: ModelConfig,
    step: u64,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: Parameters<f32>, step: u64, seed: u64) -> Self {
        Checkpoint {
            config,
            params,
            step,
            seed,
            extra: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        let all = self.params.iter().map(|(n, t)| (n.clone(), t)).chain(
            self.extra
                .iter()
                .map(|(n, t)| (format!("{EXTRA_PREFIX}{n}"), t)),
        );
        for (name, t) in all {
            let offset = payload.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
                len: payload.len() - offset,
            });
        }
        let manifest = serde_json::to_vec(&Manifest {
            config: self.config.clone(),
            step: self.step,
            seed: self.seed,
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(9 + manifest.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: origin.to_path_buf(),
            });
        }
        let version = *bytes
            .get(4)
            .ok_or_else(|| Error::Truncated("missing version byte".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len_bytes = bytes
            .get(5..9)
            .ok_or_else(|| Error::Truncated("missing manifest length".into()))?;
        let mlen = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        let manifest_bytes = bytes
            .get(9..9 + mlen)
            .ok_or_else(|| Error::Truncated(format!("manifest of {mlen} bytes cut short")))?;
        let manifest: Manifest =
            serde_json::from_slice(manifest_bytes).map_err(|e| Error::Manifest(e.to_string()))?;
        let payload = &bytes[9 + mlen..];

        let mut params = Parameters::new();
        let mut extra = BTreeMap::new();
        for e in manifest.tensors {
            let count: usize = e.shape.iter().product();
            if e.len != count * 4 {
                return Err(Error::Manifest(format!(
                    "tensor {} declares {} bytes for shape {:?}",
                    e.name, e.len, e.shape
                )));
            }
            let raw = payload.get(e.offset..e.offset + e.len).ok_or_else(|| {
                Error::Truncated(format!("payload of tensor {} is cut short", e.name))
            })?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(e.shape, data)?;
            match e.name.strip_prefix(EXTRA_PREFIX) {
                Some(n) => {
                    extra.insert(n.to_string(), t);
                }
                None => params.insert(e.name, t),
            }
        }
        params.check_against(&manifest.config)?;
        Ok(Checkpoint {
            config: manifest.config,
            params,
            step: manifest.step,
            seed: manifest.seed,
            extra,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("fmck.tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Parameters, after checking them against the config a run expects.
    pub fn params_for(&self, expected: &ModelConfig) -> Result<Parameters<f32>> {
        self.params.check_against(expected)?;
        Ok(self.params.clone())
    }
}
