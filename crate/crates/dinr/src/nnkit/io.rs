//! Weight-file container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "DINRW001"
//! header_len u32      module-specific header blob length
//! header     bytes    opaque to this module (arch descriptor, schedule, ...)
//! n_entries  u32
//! entry      repeated n_entries times:
//!   name_len u32, name utf-8 bytes, rank u32, dims rank x u32, offset u64
//! values     f32 x sum(product(dims)), row-major per block
//! ```
//!
//! Values are stored as f32 regardless of the in-memory precision. Parsing
//! never trusts a declared length before checking it against the remaining
//! input, so truncated or hostile files fail cleanly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nnkit::params::{ParamEntry, ParamSet};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"DINRW001";

const MAX_RANK: u32 = 8;

/// Byte-slice reader with bounds-checked primitives.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        ByteReader { buf, pos: 0, what }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format { what: self.what, msg: msg.into() }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.err(format!(
                "unexpected end of input: need {n} bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn take_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn take_u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn take_u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn take_f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn take_f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let got = self.take(magic.len())?;
        if got != magic {
            return Err(self.err("bad magic bytes"));
        }
        Ok(())
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.err(format!("{} trailing bytes after payload", self.remaining())));
        }
        Ok(())
    }
}

/// Serialize a ParamSet with a module-specific header blob.
pub fn write_params_bytes(params: &ParamSet, header: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(&(params.layout().len() as u32).to_le_bytes());
    for e in params.layout() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(e.offset as u64).to_le_bytes());
    }
    for &v in &params.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parse a weight file, returning the ParamSet and the opaque header blob.
pub fn read_params_bytes(bytes: &[u8]) -> Result<(ParamSet, Vec<u8>)> {
    let mut r = ByteReader::new(bytes, "weights file");
    r.expect_magic(WEIGHTS_MAGIC)?;
    let header_len = r.take_u32()? as usize;
    let header = r.take(header_len)?.to_vec();

    let n_entries = r.take_u32()? as usize;
    // Each entry occupies at least 16 bytes; reject absurd counts up front.
    if n_entries > r.remaining() / 16 {
        return Err(Error::Format {
            what: "weights file",
            msg: format!("entry count {n_entries} exceeds available data"),
        });
    }
    let mut layout = Vec::with_capacity(n_entries);
    let mut total: u64 = 0;
    for _ in 0..n_entries {
        let name_len = r.take_u32()? as usize;
        if name_len > r.remaining() {
            return Err(Error::Format { what: "weights file", msg: "name length overruns input".into() });
        }
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format { what: "weights file", msg: "name is not utf-8".into() })?
            .to_string();
        let rank = r.take_u32()?;
        if rank > MAX_RANK {
            return Err(Error::Format { what: "weights file", msg: format!("rank {rank} too large") });
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut block: u64 = 1;
        for _ in 0..rank {
            let d = r.take_u32()? as u64;
            block = block.checked_mul(d).ok_or(Error::Format {
                what: "weights file",
                msg: "dimension product overflow".into(),
            })?;
            shape.push(d as usize);
        }
        let offset = r.take_u64()?;
        total = total.checked_add(block).ok_or(Error::Format {
            what: "weights file",
            msg: "total size overflow".into(),
        })?;
        layout.push(ParamEntry { name, shape, offset: offset as usize });
    }

    let expected_bytes = total.checked_mul(4).ok_or(Error::Format {
        what: "weights file",
        msg: "payload size overflow".into(),
    })? as usize;
    if r.remaining() != expected_bytes {
        return Err(Error::Format {
            what: "weights file",
            msg: format!("value payload is {} bytes, layout requires {expected_bytes}", r.remaining()),
        });
    }
    let mut values = Vec::with_capacity(total as usize);
    for _ in 0..total {
        values.push(r.take_f32()? as f64);
    }
    r.expect_end()?;
    ParamSet::from_parts(values, layout).map(|p| (p, header))
}

pub fn write_params_file(path: &Path, params: &ParamSet, header: &[u8]) -> Result<()> {
    std::fs::write(path, write_params_bytes(params, header)).map_err(|e| Error::io(path, e))
}

pub fn read_params_file(path: &Path) -> Result<(ParamSet, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_params_bytes(&bytes)
}
