//! Binary helpers and the single-stack file format.
//!
//! Stack file layout (little-endian):
//!
//! | bytes    | content                                   |
//! |----------|-------------------------------------------|
//! | 0..4     | magic `GSFS`                              |
//! | 4..8     | format version (u32)                      |
//! | 8..12    | d (u32)                                   |
//! | 12..16   | r (u32)                                   |
//! | 16..     | d*d*r f32 values, row-major `(i, j, k)`   |
//! | last 32  | SHA-256 of the value payload              |

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lattice::FieldStack;

pub const STACK_MAGIC: &[u8; 4] = b"GSFS";
pub const STACK_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary sibling and renames, so a failed run never
/// leaves a half-written file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn f32_to_le(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn f64_to_le(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(f64::to_le_bytes).collect()
}

pub fn le_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn le_to_f64(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn encode_stack(stack: &FieldStack) -> Vec<u8> {
    let payload = f32_to_le(stack.values.iter().map(|&v| v as f32));
    let mut out = Vec::with_capacity(16 + payload.len() + 32);
    out.extend_from_slice(STACK_MAGIC);
    out.extend_from_slice(&STACK_VERSION.to_le_bytes());
    out.extend_from_slice(&(stack.d as u32).to_le_bytes());
    out.extend_from_slice(&(stack.r as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    out
}

pub fn decode_stack(bytes: &[u8]) -> Result<FieldStack> {
    if bytes.len() < 16 || &bytes[0..4] != STACK_MAGIC {
        return Err(Error::Format("not a field-stack file (bad magic)".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().unwrap());
    let version = word(4);
    if version != STACK_VERSION {
        return Err(Error::Version {
            found: version,
            supported: STACK_VERSION,
        });
    }
    let (d, r) = (word(8) as usize, word(12) as usize);
    let expected = 16 + 4 * (d * d * r) as u64 + 32;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            what: "field stack".into(),
            expected,
            found: bytes.len() as u64,
        });
    }
    let payload = &bytes[16..bytes.len() - 32];
    let stored = hex::encode(&bytes[bytes.len() - 32..]);
    let computed = sha256_hex(payload);
    if stored != computed {
        return Err(Error::Checksum {
            what: "field stack".into(),
            expected: stored,
            computed,
        });
    }
    let values = le_to_f32(payload).into_iter().map(f64::from).collect();
    FieldStack::new(d, r, values)
}

pub fn save_stack(path: &Path, stack: &FieldStack) -> Result<()> {
    write_atomic(path, &encode_stack(stack))
}

pub fn load_stack(path: &Path) -> Result<FieldStack> {
    decode_stack(&fs::read(path)?)
}
