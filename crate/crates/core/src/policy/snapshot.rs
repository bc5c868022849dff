//! Policy snapshots and their on-disk container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes      | content                                              |
//! |------------|------------------------------------------------------|
//! | 8          | magic `RLZSNAP\0`                                    |
//! | 4          | `u32` format version                                 |
//! | 4          | `u32` header length `H`                              |
//! | H          | UTF-8 JSON header `{"config": .., "vocabulary": ..}` |
//! | 8          | `u64` parameter count `N`                            |
//! | 8 · N      | parameters as `f64`                                  |
//! | 32         | SHA-256 of every preceding byte                      |

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Policy, PolicyConfig};
use crate::error::{Error, Result};

pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"RLZSNAP\0";

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    pub format_version: u32,
    pub config: PolicyConfig,
    /// Token strings in id order; empty when the policy is not tied to a
    /// vocabulary.
    pub vocabulary: Vec<String>,
    pub parameters: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: PolicyConfig,
    vocabulary: Vec<String>,
}

impl PolicySnapshot {
    pub fn capture(policy: &Policy, vocabulary: &[String]) -> Self {
        Self {
            format_version: SNAPSHOT_FORMAT_VERSION,
            config: policy.config().clone(),
            vocabulary: vocabulary.to_vec(),
            parameters: policy.params().to_vec(),
        }
    }

    pub fn restore(&self) -> Result<Policy> {
        if self.format_version != SNAPSHOT_FORMAT_VERSION {
            return Err(Error::IncompatibleSnapshot(format!(
                "format version {} (expected {SNAPSHOT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if !self.vocabulary.is_empty() && self.vocabulary.len() != self.config.vocab_size {
            return Err(Error::IncompatibleSnapshot(format!(
                "vocabulary has {} tokens but config says {}",
                self.vocabulary.len(),
                self.config.vocab_size
            )));
        }
        Policy::from_parts(self.config.clone(), self.parameters.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            vocabulary: self.vocabulary.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(64 + header.len() + 8 * self.parameters.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.parameters.len() as u64).to_le_bytes());
        for p in &self.parameters {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::CorruptSnapshot(msg.to_string());
        if bytes.len() < MAGIC.len() + 8 + 8 + 32 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let format_version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if format_version != SNAPSHOT_FORMAT_VERSION {
            return Err(Error::IncompatibleSnapshot(format!(
                "format version {format_version} (expected {SNAPSHOT_FORMAT_VERSION})"
            )));
        }
        let header_len = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
        let header_end = 16 + header_len;
        if body.len() < header_end + 8 {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[16..header_end])
            .map_err(|e| Error::CorruptSnapshot(format!("header: {e}")))?;
        let count = u64::from_le_bytes(
            body[header_end..header_end + 8]
                .try_into()
                .expect("8 bytes"),
        ) as usize;
        let data = &body[header_end + 8..];
        if data.len() != count * 8 {
            return Err(corrupt("parameter block length mismatch"));
        }
        let parameters = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            format_version,
            config: header.config,
            vocabulary: header.vocabulary,
            parameters,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
