//! Binary checkpoint format.
//!
//! ```text
//! "INFL" | u32 version | u32 n, n bytes of key=value config | 32-byte vocab digest
//! u32 tensor count | per tensor: u32 name length, name, u32 rank, u32 dims.., f32 data
//! ```
//! All integers and floats little-endian.

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use super::params::{Params, Transformer};
use super::{ModelConfig, ModelError};

const MAGIC: &[u8; 4] = b"INFL";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model and the digest of the vocabulary it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Transformer<f32>,
    pub vocab_digest: [u8; 32],
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = self.model.config.to_key_values();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.vocab_digest);
        let named = self.model.params.named();
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &dim in &t.shape {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 of the serialized bytes.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }

    pub fn save<W: Write>(&self, mut sink: W) -> Result<(), ModelError> {
        sink.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Parses a checkpoint. With `expected_vocab`, a different stored digest
    /// is a `DigestMismatch`.
    pub fn load<R: Read>(mut source: R, expected_vocab: Option<&[u8; 32]>) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, expected_vocab)
    }

    pub fn from_bytes(bytes: &[u8], expected_vocab: Option<&[u8; 32]>) -> Result<Self, ModelError> {
        let mut r = Cursor { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(ModelError::CorruptTensor("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| ModelError::CorruptTensor("config block is not UTF-8".into()))?;
        let config = ModelConfig::from_key_values(cfg_text)?;
        let mut vocab_digest = [0u8; 32];
        vocab_digest.copy_from_slice(r.take(32)?);
        if let Some(expected) = expected_vocab {
            if expected != &vocab_digest {
                return Err(ModelError::DigestMismatch {
                    expected: hex::encode(expected),
                    found: hex::encode(vocab_digest),
                });
            }
        }
        let mut params = Params::<f32>::zeros(&config);
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        let count = r.u32()? as usize;
        if count != names.len() {
            return Err(ModelError::CorruptTensor(format!("{count} tensors, config implies {}", names.len())));
        }
        for (want, t) in names.iter().zip(params.tensors_mut()) {
            let name_len = r.u32()? as usize;
            let name = r.take(name_len)?;
            if name != want.as_bytes() {
                return Err(ModelError::CorruptTensor(format!(
                    "expected tensor {want}, found {}",
                    String::from_utf8_lossy(name)
                )));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            if shape != t.shape {
                return Err(ModelError::CorruptTensor(format!("{want}: shape {shape:?}, expected {:?}", t.shape)));
            }
            let raw = r.take(t.data.len() * 4)?;
            for (x, chunk) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
                *x = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        if r.at != bytes.len() {
            return Err(ModelError::CorruptTensor(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Self {
            model: Transformer::from_params(config, params)?,
            vocab_digest,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            ModelError::CorruptTensor(format!("truncated at byte {} (wanted {n} more)", self.at))
        })?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
