//! Latent-code files written by `encode` and read by `decode`.
//!
//! ```text
//! latents.toml            manifest
//! codes/<index>.skl       one code per encoded chunk
//! ```
//!
//! Code (`.skl`) layout, little-endian:
//!
//! | offset | size | field                            |
//! |--------|------|----------------------------------|
//! | 0      | 4    | magic `SKFL`                     |
//! | 4      | 2    | format version (1)               |
//! | 6      | 2    | reserved, zero                   |
//! | 8      | 4    | latent size Z (u32)              |
//! | 12     | 4    | frame count F (u32)              |
//! | 16     | 4    | CRC-32 (IEEE) of the body        |
//! | 20     | 4ZF  | body: f32, `(z, f)` at `z*F + f` |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use skelfree::mocap::Split;
use skelfree::model::LatentCode;

use crate::error::CliError;

pub const LATENT_MAGIC: [u8; 4] = *b"SKFL";
pub const LATENT_VERSION: u16 = 1;
pub const LATENT_MANIFEST: &str = "latents.toml";
const HEADER: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentEntry {
    pub file: String,
    /// Index of the encoded chunk in the source dataset.
    pub chunk: usize,
    pub source: String,
    pub source_template: String,
    pub split: Split,
    pub start_frame: usize,
    pub mean_offset: [f64; 3],
    pub framerate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentManifest {
    pub format: String,
    pub version: u32,
    /// Fingerprint of the encoding model.
    pub model: String,
    pub codes: Vec<LatentEntry>,
}

pub fn encode_latent(z: &LatentCode) -> Vec<u8> {
    let body: Vec<u8> = z.values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    let mut out = Vec::with_capacity(HEADER + body.len());
    out.extend_from_slice(&LATENT_MAGIC);
    out.extend_from_slice(&LATENT_VERSION.to_le_bytes());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(z.latent_size as u32).to_le_bytes());
    out.extend_from_slice(&(z.frames as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn decode_latent(bytes: &[u8], name: &str) -> Result<LatentCode, CliError> {
    let bad = |msg: &str| CliError::Data(format!("{name}: {msg}"));
    if bytes.len() < HEADER || bytes[0..4] != LATENT_MAGIC {
        return Err(bad("not a latent file"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    if u16_at(4) != LATENT_VERSION {
        return Err(bad(&format!("version {} (expected {LATENT_VERSION})", u16_at(4))));
    }
    let (z, f) = (u32_at(8) as usize, u32_at(12) as usize);
    let body = &bytes[HEADER..];
    if body.len() != 4 * z * f {
        return Err(bad("truncated body"));
    }
    if crc32fast::hash(body) != u32_at(16) {
        return Err(bad("checksum mismatch"));
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Ok(LatentCode { latent_size: z, frames: f, values })
}

pub fn write_manifest(dir: &Path, m: &LatentManifest) -> Result<(), CliError> {
    let text = toml::to_string(m).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(dir.join(LATENT_MANIFEST), text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<LatentManifest, CliError> {
    let path = dir.join(LATENT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let m: LatentManifest = toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if m.format != "skelfree-latents" || m.version != 1 {
        return Err(CliError::Data(format!("{}: unsupported format {} v{}", path.display(), m.format, m.version)));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_round_trip_and_corruption() {
        let z = LatentCode { latent_size: 2, frames: 3, values: vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.125] };
        let bytes = encode_latent(&z);
        assert_eq!(decode_latent(&bytes, "x").unwrap(), z);
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() ^= 1;
        assert!(decode_latent(&bad, "x").is_err());
        assert!(decode_latent(&bytes[..10], "x").is_err());
    }
}
