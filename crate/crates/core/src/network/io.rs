//! Weights container.
//!
//! | field            | encoding                                      |
//! |------------------|-----------------------------------------------|
//! | magic            | `GSNW`                                        |
//! | version          | u32                                           |
//! | spec length      | u32, then that many bytes of JSON spec echo   |
//! | tensor count     | u32                                           |
//! | per tensor       | u32 rank, then rank u32 dimensions            |
//! | payload          | all parameters as f32, tensor order           |
//! | checksum         | SHA-256 of everything before it (32 bytes)    |

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{NetworkSpec, NetworkWeights};
use crate::error::{Error, Result};
use crate::io::{f32_to_le, le_to_f32, sha256_hex, write_atomic};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"GSNW";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn encode_weights(w: &NetworkWeights<f32>) -> Vec<u8> {
    let spec_json = serde_json::to_vec(&w.spec).expect("spec serializes");
    let shapes = w.spec.tensor_shapes();
    let mut out = Vec::with_capacity(64 + spec_json.len() + 4 * w.params.len());
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec_json);
    out.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
    for s in &shapes {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        for &dim in s {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
    }
    out.extend_from_slice(&f32_to_le(w.params.iter().copied()));
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                what: "weights header".into(),
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<NetworkWeights<f32>> {
    if bytes.len() < 8 || &bytes[..4] != WEIGHTS_MAGIC {
        return Err(Error::Format("not a weights file (bad magic)".into()));
    }
    let mut rd = Reader { bytes, pos: 4 };
    let version = rd.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Version { found: version, supported: WEIGHTS_VERSION });
    }
    let spec_len = rd.u32()? as usize;
    let spec: NetworkSpec = serde_json::from_slice(rd.take(spec_len)?)
        .map_err(|e| Error::Format(format!("weights spec echo: {e}")))?;
    spec.validate()?;
    let count = rd.u32()? as usize;
    let mut shapes = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let rank = rd.u32()? as usize;
        let dims = (0..rank).map(|_| rd.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        shapes.push(dims);
    }
    let want = spec.tensor_shapes();
    if shapes != want {
        return Err(Error::InputShape {
            expected: format!("{want:?}"),
            actual: format!("{shapes:?}"),
        });
    }
    let n_params = spec.total_params();
    let expected = (rd.pos + 4 * n_params + 32) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            what: "weights".into(),
            expected,
            found: bytes.len() as u64,
        });
    }
    let body = &bytes[..bytes.len() - 32];
    let stored = hex::encode(&bytes[bytes.len() - 32..]);
    let computed = sha256_hex(body);
    if stored != computed {
        return Err(Error::Checksum { what: "weights".into(), expected: stored, computed });
    }
    let params = le_to_f32(&body[rd.pos..]);
    if params.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("weights contain non-finite values".into()));
    }
    Ok(NetworkWeights { spec, params })
}

pub fn save_weights(w: &NetworkWeights<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_weights(w))
}

pub fn load_weights(path: &Path) -> Result<NetworkWeights<f32>> {
    decode_weights(&fs::read(path)?)
}
