//! Binary container shared by checkpoints and dataset files.
//!
//! Layout: 8-byte magic, u64 LE header length, JSON header, then blocks of
//! `u64 LE count` followed by `count` little-endian f64 values, until EOF.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn encode<H: Serialize>(magic: &[u8; 8], header: &H, blocks: &[&[f64]]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let floats: usize = blocks.iter().map(|b| b.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * (blocks.len() + floats));
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for block in blocks {
        out.extend_from_slice(&(block.len() as u64).to_le_bytes());
        for v in *block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) fn write<H: Serialize>(
    path: &Path,
    magic: &[u8; 8],
    header: &H,
    blocks: &[&[f64]],
) -> Result<()> {
    fs::write(path, encode(magic, header, blocks)).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.path,
                field,
                format!(
                    "truncated: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            )),
        }
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        let b = self.take(8, field)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub(crate) fn read<H: DeserializeOwned>(
    path: &Path,
    magic: &[u8; 8],
) -> Result<(H, Vec<Vec<f64>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes, magic)
}

pub(crate) fn decode<H: DeserializeOwned>(
    path: &Path,
    bytes: &[u8],
    magic: &[u8; 8],
) -> Result<(H, Vec<Vec<f64>>)> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(8, "magic")? != magic {
        return Err(Error::format(
            path,
            "magic",
            format!("expected {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let len = cur.u64("header_length")?;
    let len = usize::try_from(len)
        .map_err(|_| Error::format(path, "header_length", "too large"))?;
    let json = cur.take(len, "header")?;
    let header: H = serde_json::from_slice(json)
        .map_err(|e| Error::format(path, "header", e.to_string()))?;
    let mut blocks = Vec::new();
    while cur.pos < bytes.len() {
        let field = format!("block {}", blocks.len());
        let count = cur.u64(&field)?;
        let n = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| Error::format(path, field.as_str(), "length overflows"))?;
        let raw = cur.take(n, &field)?;
        blocks.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        );
    }
    Ok((header, blocks))
}
