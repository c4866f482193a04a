//! Binary checkpoint: `PDCK`, u32 version, u32 slice count, then per slice a
//! u32 name length, UTF-8 name, u32 rows, u32 cols and `rows*cols`
//! little-endian f64 values. All integers little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{NnError, Result};

const MAGIC: &[u8; 4] = b"PDCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSlice {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub slices: Vec<CheckpointSlice>,
}

impl Checkpoint {
    pub fn slice(&self, name: &str) -> Option<&CheckpointSlice> {
        self.slices.iter().find(|s| s.name == name)
    }

    pub fn merge(mut self, other: Checkpoint) -> Self {
        self.slices.extend(other.slices);
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.slices.len() as u32).to_le_bytes());
        for s in &self.slices {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.rows as u32).to_le_bytes());
            out.extend_from_slice(&(s.cols as u32).to_le_bytes());
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| NnError::BadCheckpoint(m.to_string());
        let mut magic = [0u8; 4];
        bytes.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let read_u32 = |b: &mut &[u8]| -> Result<u32> {
            let mut buf = [0u8; 4];
            b.read_exact(&mut buf).map_err(|_| bad("truncated"))?;
            Ok(u32::from_le_bytes(buf))
        };
        if read_u32(&mut bytes)? != VERSION {
            return Err(bad("unsupported version"));
        }
        let count = read_u32(&mut bytes)? as usize;
        let mut slices = Vec::with_capacity(count);
        for _ in 0..count {
            let n = read_u32(&mut bytes)? as usize;
            if bytes.len() < n {
                return Err(bad("truncated name"));
            }
            let name = std::str::from_utf8(&bytes[..n]).map_err(|_| bad("name is not utf-8"))?.to_string();
            bytes = &bytes[n..];
            let rows = read_u32(&mut bytes)? as usize;
            let cols = read_u32(&mut bytes)? as usize;
            let len = rows * cols;
            if bytes.len() < len * 8 {
                return Err(bad("truncated data"));
            }
            let data = bytes[..len * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            bytes = &bytes[len * 8..];
            slices.push(CheckpointSlice { name, rows, cols, data });
        }
        if !bytes.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { slices })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
