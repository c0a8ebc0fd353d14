//! Binary checkpoint container.
//!
//! ```text
//! magic        5 bytes   "GPDA1" or "MCDA1"
//! version      u32 LE
//! body_len     u64 LE
//! body:
//!   config digest   32 bytes, SHA-256 of the config JSON
//!   config_len      u32 LE, then the config JSON (UTF-8)
//!   n_segments      u32 LE, then per segment:
//!                     name_len u16 LE, name, offset u64, rows u64, cols u64
//!   n_values        u64 LE, then n_values f64 LE
//! checksum     32 bytes, SHA-256 of everything before it
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffmath::{Layout, ParamVector};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const GPDA_MAGIC: &[u8; 5] = b"GPDA1";
pub const MCDA_MAGIC: &[u8; 5] = b"MCDA1";
const PREAMBLE: usize = 5 + 4 + 8;
const CHECKSUM: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint of the expected kind (magic {found:?})")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {found} (this build reads {supported})")]
    Version { found: u32, supported: u32 },
    #[error("truncated checkpoint: need {expected} bytes, file has {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint body: {0}")]
    Format(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointContents {
    pub config_json: String,
    pub params: ParamVector,
}

pub fn config_digest(config_json: &str) -> [u8; 32] {
    Sha256::digest(config_json.as_bytes()).into()
}

pub fn encode(magic: &[u8; 5], config_json: &str, params: &ParamVector) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend_from_slice(&config_digest(config_json));
    body.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    body.extend_from_slice(config_json.as_bytes());
    let segs = params.layout().segments();
    body.extend_from_slice(&(segs.len() as u32).to_le_bytes());
    for s in segs {
        body.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
        body.extend_from_slice(s.name.as_bytes());
        for v in [s.offset, s.rows, s.cols] {
            body.extend_from_slice(&(v as u64).to_le_bytes());
        }
    }
    body.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        body.extend_from_slice(&v.to_le_bytes());
    }

    let mut out = Vec::with_capacity(PREAMBLE + body.len() + CHECKSUM);
    out.extend_from_slice(magic);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Format("body shorter than its contents".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(magic: &[u8; 5], bytes: &[u8]) -> Result<CheckpointContents, CheckpointError> {
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::Truncated {
            expected: PREAMBLE,
            found: bytes.len(),
        });
    }
    if &bytes[..5] != magic {
        return Err(CheckpointError::BadMagic {
            found: bytes[..5].to_vec(),
        });
    }
    let version = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let body_len = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes"));
    let expected = usize::try_from(body_len)
        .ok()
        .and_then(|b| b.checked_add(PREAMBLE + CHECKSUM))
        .unwrap_or(usize::MAX);
    if bytes.len() < expected {
        return Err(CheckpointError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let signed = &bytes[..expected - CHECKSUM];
    if Sha256::digest(signed).as_slice() != &bytes[expected - CHECKSUM..expected] {
        return Err(CheckpointError::Checksum);
    }
    if bytes.len() != expected {
        return Err(CheckpointError::Format("trailing bytes after checksum".into()));
    }

    let mut c = Cursor {
        buf: &signed[PREAMBLE..],
        pos: 0,
    };
    let digest: [u8; 32] = c.take(32)?.try_into().expect("32 bytes");
    let cfg_len = c.u32()? as usize;
    let config_json = std::str::from_utf8(c.take(cfg_len)?)
        .map_err(|_| CheckpointError::Format("config is not UTF-8".into()))?
        .to_string();
    if config_digest(&config_json) != digest {
        return Err(CheckpointError::Format("config digest does not match".into()));
    }
    let n_segs = c.u32()? as usize;
    let mut shapes = Vec::with_capacity(n_segs);
    let mut next_offset = 0u64;
    for _ in 0..n_segs {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| CheckpointError::Format("segment name is not UTF-8".into()))?
            .to_string();
        let (offset, rows, cols) = (c.u64()?, c.u64()?, c.u64()?);
        if offset != next_offset {
            return Err(CheckpointError::Format(format!("segment `{name}` is not contiguous")));
        }
        next_offset = offset + rows * cols;
        shapes.push((name, rows as usize, cols as usize));
    }
    let n = c.u64()?;
    if n != next_offset {
        return Err(CheckpointError::Format("value count disagrees with layout".into()));
    }
    let raw = c.take(n as usize * 8)?;
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    if c.pos != c.buf.len() {
        return Err(CheckpointError::Format("unread bytes in body".into()));
    }
    let params = ParamVector::from_parts(Layout::from_shapes(shapes), values)
        .map_err(|e| CheckpointError::Format(e.to_string()))?;
    Ok(CheckpointContents { config_json, params })
}

/// Writes atomically: a sibling temporary file renamed over `path`.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_file(magic: &[u8; 5], path: &Path) -> Result<CheckpointContents, CheckpointError> {
    decode(magic, &fs::read(path)?)
}
