//! Versioned checkpoints with a bit-exact `f64` payload.
//!
//! Layout: the magic line, one JSON header line, then the payload as
//! little-endian `f64`s.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8] = b"FLOWDISTILL-CKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Scene,
    Denoiser,
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: CheckpointKind,
    shape: Vec<usize>,
    len: usize,
    config_hash: String,
    rng_counter: u64,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub shape: Vec<usize>,
    pub payload: Vec<f64>,
    pub config_hash: String,
    /// Next counter of the run's RNG stream (e.g. training steps taken).
    pub rng_counter: u64,
    /// Kind-specific extras, such as the network architecture.
    pub meta: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, shape: Vec<usize>, payload: Vec<f64>) -> Self {
        Self { kind, shape, payload, config_hash: String::new(), rng_counter: 0, meta: serde_json::Value::Null }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: FORMAT_VERSION,
            kind: self.kind,
            shape: self.shape.clone(),
            len: self.payload.len(),
            config_hash: self.config_hash.clone(),
            rng_counter: self.rng_counter,
            meta: self.meta.clone(),
        };
        let mut out = MAGIC.to_vec();
        out.extend(serde_json::to_string(&header).expect("header serializes").as_bytes());
        out.push(b'\n');
        for v in &self.payload {
            out.extend(v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| format_err("not a flowdistill checkpoint"))?;
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| format_err("truncated checkpoint header"))?;
        let header: Header =
            serde_json::from_slice(&rest[..nl]).map_err(|e| format_err(format!("bad checkpoint header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported checkpoint version {}", header.version)));
        }
        let body = &rest[nl + 1..];
        if body.len() != 8 * header.len {
            return Err(format_err(format!("payload has {} bytes, header says {} values", body.len(), header.len)));
        }
        let payload = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Self {
            kind: header.kind,
            shape: header.shape,
            payload,
            config_hash: header.config_hash,
            rng_counter: header.rng_counter,
            meta: header.meta,
        })
    }

    /// Writes the file and returns the SHA-256 of its bytes.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn expect_kind(self, kind: CheckpointKind) -> Result<Self> {
        if self.kind != kind {
            return Err(format_err(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_exact_round_trip() {
        let payload = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, f64::from_bits(0x7ff8_0000_0000_0001), 3.0];
        let mut c = Checkpoint::new(CheckpointKind::Scene, vec![2, 3], payload.clone());
        c.rng_counter = 42;
        c.config_hash = sha256_hex(b"cfg");
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.payload), bits(&payload));
        assert_eq!((back.shape, back.rng_counter, back.config_hash), (c.shape, 42, c.config_hash));
    }

    #[test]
    fn rejects_corruption() {
        let c = Checkpoint::new(CheckpointKind::Denoiser, vec![1], vec![1.0]);
        let mut b = c.to_bytes();
        b.pop();
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format(_))));
        assert!(Checkpoint::from_bytes(b"junk").is_err());
        assert!(c.expect_kind(CheckpointKind::Scene).is_err());
    }

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
