//! Self-describing model files.
//!
//! ```text
//! "ADPTNET1" | header_len: u32 LE | header (JSON) | SHA-256(header)
//!            | payload: f32 LE, tensors in header order | SHA-256(payload)
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::models::{AdapterLayer, AdapterNet, ArchConfig, Backbone, RGB};
use crate::scalar::Precision;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ADPTNET1";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("malformed header: {0}")]
    Format(String),
    #[error("header declares {expected} payload bytes but the file carries {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("file truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("payload checksum mismatch")]
    Corrupt,
    #[error("model file holds a {found:?}, expected a {expected:?}")]
    WrongKind {
        expected: ModelKind,
        found: ModelKind,
    },
    #[error(transparent)]
    Model(#[from] crate::Error),
}

type Result<T> = std::result::Result<T, ModelFileError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Backbone,
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub kind: ModelKind,
    /// Present for backbones.
    pub arch: Option<ArchConfig>,
    pub tensors: Vec<TensorEntry>,
    pub channel_means: Option<[f32; RGB]>,
    /// Top-1 on the clean test split, cached with the backbone.
    pub clean_top1: Option<f64>,
    pub seed: u64,
    pub precision: Precision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub header: ModelHeader,
    pub tensors: Vec<Tensor<f32>>,
}

impl ModelFile {
    pub fn from_backbone(
        backbone: &Backbone<f32>,
        channel_means: [f32; RGB],
        clean_top1: Option<f64>,
        seed: u64,
    ) -> Self {
        let tensors: Vec<Tensor<f32>> = backbone.params().into_iter().cloned().collect();
        let entries = tensors
            .iter()
            .enumerate()
            .map(|(i, t)| TensorEntry {
                name: format!(
                    "layer{}.{}",
                    i / 2,
                    if i % 2 == 0 { "weights" } else { "bias" }
                ),
                shape: t.shape().to_vec(),
            })
            .collect();
        Self {
            header: ModelHeader {
                kind: ModelKind::Backbone,
                arch: Some(backbone.arch().clone()),
                tensors: entries,
                channel_means: Some(channel_means),
                clean_top1,
                seed,
                precision: Precision::F32,
            },
            tensors,
        }
    }

    pub fn from_adapter(adapter: &AdapterNet<f32>, seed: u64) -> Self {
        let tensors: Vec<Tensor<f32>> = adapter.params().into_iter().cloned().collect();
        let entries = tensors
            .iter()
            .enumerate()
            .map(|(i, t)| TensorEntry {
                name: format!(
                    "adapter{}.{}",
                    i / 2,
                    if i % 2 == 0 { "weights" } else { "bias" }
                ),
                shape: t.shape().to_vec(),
            })
            .collect();
        Self {
            header: ModelHeader {
                kind: ModelKind::Adapter,
                arch: None,
                tensors: entries,
                channel_means: None,
                clean_top1: None,
                seed,
                precision: Precision::F32,
            },
            tensors,
        }
    }

    fn expect_kind(&self, expected: ModelKind) -> Result<()> {
        if self.header.kind != expected {
            return Err(ModelFileError::WrongKind {
                expected,
                found: self.header.kind,
            });
        }
        Ok(())
    }

    /// The stored backbone (frozen) and its channel means.
    pub fn backbone(&self) -> Result<(Backbone<f32>, [f32; RGB])> {
        self.expect_kind(ModelKind::Backbone)?;
        let arch = self
            .header
            .arch
            .as_ref()
            .ok_or_else(|| ModelFileError::Format("backbone without arch".into()))?;
        let means = self
            .header
            .channel_means
            .ok_or_else(|| ModelFileError::Format("backbone without channel_means".into()))?;
        Ok((Backbone::from_params(arch, self.tensors.clone())?, means))
    }

    /// The stored adapter, trainable.
    pub fn adapter(&self) -> Result<AdapterNet<f32>> {
        self.expect_kind(ModelKind::Adapter)?;
        if !self.tensors.len().is_multiple_of(2) {
            return Err(ModelFileError::Format(
                "adapter tensors must come in weight/bias pairs".into(),
            ));
        }
        let layers = self
            .tensors
            .chunks_exact(2)
            .map(|p| AdapterLayer {
                weights: p[0].clone().with_requires_grad(true),
                bias: p[1].clone().with_requires_grad(true),
            })
            .collect();
        Ok(AdapterNet::from_layers(layers)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let payload: Vec<u8> = self
            .tensors
            .iter()
            .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect();
        let mut out = Vec::with_capacity(8 + 4 + header.len() + payload.len() + 2 * DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&Sha256::digest(&header));
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |needed: usize| {
            if bytes.len() < needed {
                Err(ModelFileError::Truncated {
                    needed,
                    have: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(MAGIC.len())?;
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(ModelFileError::BadMagic);
        }
        need(12)?;
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = 12 + header_len;
        need(header_end + DIGEST_LEN)?;
        let header_bytes = &bytes[12..header_end];
        if Sha256::digest(header_bytes).as_slice() != &bytes[header_end..header_end + DIGEST_LEN] {
            return Err(ModelFileError::Format("header checksum mismatch".into()));
        }
        let header: ModelHeader = serde_json::from_slice(header_bytes)
            .map_err(|e| ModelFileError::Format(e.to_string()))?;
        if header.precision != Precision::F32 {
            return Err(ModelFileError::Format(format!(
                "unsupported payload precision {:?}",
                header.precision
            )));
        }
        let numel: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        let payload_start = header_end + DIGEST_LEN;
        let payload_len = numel * 4;
        let end = payload_start + payload_len + DIGEST_LEN;
        need(end)?;
        if bytes.len() != end {
            return Err(ModelFileError::ShapeMismatch {
                expected: payload_len,
                got: bytes.len() - payload_start - DIGEST_LEN,
            });
        }
        let payload = &bytes[payload_start..payload_start + payload_len];
        if Sha256::digest(payload).as_slice() != &bytes[payload_start + payload_len..] {
            return Err(ModelFileError::Corrupt);
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let tensors = header
            .tensors
            .iter()
            .map(|e| {
                let n = e.shape.iter().product();
                Tensor::new(e.shape.clone(), values.by_ref().take(n).collect())
                    .map_err(|err| ModelFileError::Format(format!("tensor `{}`: {err}", e.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { header, tensors })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()).map_err(|source| ModelFileError::Io {
            path: path.into(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| ModelFileError::Io {
            path: path.into(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Write-temp-then-rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}
