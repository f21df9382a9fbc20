//! Binary parameter encoding, shared by `model.fmdf` files and the wire.
//!
//! Layout (little-endian): magic `FMDF`, u32 version, u32 layer count, per
//! layer u32 rows, u32 cols and `rows * cols` f64 weights (row-major), then
//! every layer's f64 biases in order, then f64 `mu` and f64 dropout.

use crate::error::{Error, Result};
use crate::mdfnn::{Layer, ModelParams};
use crate::plates::fnv1a64;

pub const MAGIC: &[u8; 4] = b"FMDF";
pub const VERSION: u32 = 1;
/// Guards against absurd allocations from corrupted headers.
const MAX_LAYER_VALUES: usize = 1 << 26;

pub fn encode_params(p: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * p.param_count() + 8 * p.layers.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(p.layers.len() as u32).to_le_bytes());
    for l in &p.layers {
        out.extend_from_slice(&(l.rows as u32).to_le_bytes());
        out.extend_from_slice(&(l.cols as u32).to_le_bytes());
        for w in &l.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    for l in &p.layers {
        for b in &l.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out.extend_from_slice(&p.mu.to_le_bytes());
    out.extend_from_slice(&p.dropout.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Decode {
                offset: self.buf.len(),
                reason: format!("truncated while reading {what} at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Decode { offset: 0, reason: "bad magic".into() });
    }
    let version_at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Decode { offset: version_at, reason: format!("unsupported version {version}") });
    }
    let count_at = r.pos;
    let count = r.u32("layer count")? as usize;
    if count == 0 || count > 1024 {
        return Err(Error::Decode { offset: count_at, reason: format!("implausible layer count {count}") });
    }
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let at = r.pos;
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let n = rows.checked_mul(cols).filter(|&n| n > 0 && n <= MAX_LAYER_VALUES).ok_or_else(|| Error::Decode {
            offset: at,
            reason: format!("layer {i} has invalid shape {rows}x{cols}"),
        })?;
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            weights.push(r.f64("weights")?);
        }
        layers.push(Layer { rows, cols, weights, bias: Vec::new() });
    }
    for l in &mut layers {
        for _ in 0..l.rows {
            l.bias.push(r.f64("biases")?);
        }
    }
    let mu = r.f64("mu")?;
    let dropout = r.f64("dropout")?;
    if r.pos != bytes.len() {
        return Err(Error::Decode { offset: r.pos, reason: format!("{} trailing bytes", bytes.len() - r.pos) });
    }
    let p = ModelParams { layers, dropout, mu };
    p.validate().map_err(|e| Error::Decode { offset: 0, reason: e.to_string() })?;
    Ok(p)
}

/// 64-bit checksum of the encoded parameters.
pub fn digest(p: &ModelParams) -> u64 {
    fnv1a64(&encode_params(p))
}

pub fn save_params(p: &ModelParams, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, encode_params(p)).map_err(crate::error::file_error(path))
}

pub fn load_params(path: &std::path::Path) -> Result<ModelParams> {
    decode_params(&std::fs::read(path).map_err(crate::error::file_error(path))?)
}
