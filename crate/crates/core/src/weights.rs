//! Binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "TLLMW1\0\0"
//! vocab_size   u32
//! hidden_dim   u32
//! num_layers   u32
//! num_heads    u32
//! ffn_dim      u32
//! max_seq_len  u32
//! then, until end of file, one record per parameter:
//!   name_len   u16
//!   name       name_len bytes, UTF-8
//!   rank       u32
//!   dims       rank × u32
//!   payload    product(dims) × f32, row-major
//! ```
//!
//! Values are narrowed to `f32` on write and widened back to `f64` on read.

use std::io::{Read, Write};
use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::{Error, Result, Tensor};

pub const MAGIC: &[u8; 8] = b"TLLMW1\0\0";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

pub fn encode<'a>(config: &BackboneConfig, params: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in config.header_fields() {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(field, "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<(BackboneConfig, Vec<NamedTensor>)> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::format("magic", format!("expected {MAGIC:?}, found {magic:?}")));
    }
    const FIELDS: [&str; 6] = ["vocab_size", "hidden_dim", "num_layers", "num_heads", "ffn_dim", "max_seq_len"];
    let mut h = [0usize; 6];
    for (slot, field) in h.iter_mut().zip(FIELDS) {
        *slot = cur.u32(field)? as usize;
    }
    let config = BackboneConfig {
        vocab_size: h[0],
        hidden_dim: h[1],
        num_layers: h[2],
        num_heads: h[3],
        ffn_dim: h[4],
        max_seq_len: h[5],
    };

    let mut params = Vec::new();
    while !cur.done() {
        let len = cur.u16("name_len")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::format("name", "not valid UTF-8"))?
            .to_string();
        let rank = cur.u32(&name)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32(&name)? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = cur.take(n * 4, &name)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let tensor = Tensor::new(dims, data)?;
        params.push(NamedTensor { name, tensor });
    }
    Ok((config, params))
}

pub fn write_file<'a>(
    path: &Path,
    config: &BackboneConfig,
    params: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let bytes = encode(config, params);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<(BackboneConfig, Vec<NamedTensor>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Rounds through `f32` so a value survives a write/read cycle unchanged.
pub fn to_f32_precision(x: f64) -> f64 {
    x as f32 as f64
}
