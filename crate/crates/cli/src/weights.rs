//! Binary weights file.
//!
//! Little-endian throughout: the magic `GMTW`, a `u32` version, eight `u64`
//! header fields (`D`, `D_roi`, `D_st`, `H`, `d_raw`, `hidden_roi`,
//! `hidden_st`, `D_ff`), a `u64` tensor count, then per tensor a `u64` name
//! length, the UTF-8 name, a `u64` value count and the `f64` values.

use std::fs;
use std::path::Path;

use gmt_core::assoc::GmtParams;
use gmt_core::features::FeatureDims;
use gmt_core::params::Parameters;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"GMTW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightsHeader {
    pub dim: usize,
    pub d_roi: usize,
    pub d_st: usize,
    pub heads: usize,
    pub d_raw: usize,
    pub hidden_roi: usize,
    pub hidden_st: usize,
    pub d_ff: usize,
}

impl WeightsHeader {
    pub fn of(p: &GmtParams) -> Self {
        let f = p.features.dims();
        let a = p.assoc.config();
        Self {
            dim: a.dim,
            d_roi: f.d_roi,
            d_st: f.d_st,
            heads: a.heads,
            d_raw: f.d_raw,
            hidden_roi: f.hidden_roi,
            hidden_st: f.hidden_st,
            d_ff: a.d_ff,
        }
    }

    pub fn feature_dims(&self) -> FeatureDims {
        FeatureDims {
            d_raw: self.d_raw,
            d_roi: self.d_roi,
            d_st: self.d_st,
            hidden_roi: self.hidden_roi,
            hidden_st: self.hidden_st,
        }
    }

    /// Errors when the file disagrees with the configured model.
    pub fn check(&self, dims: &FeatureDims, heads: usize) -> Result<()> {
        if self.feature_dims() != *dims || self.heads != heads {
            return Err(CliError::Data(format!(
                "weights (D={}, D_roi={}, D_st={}, H={}, d_raw={}) do not match the configured model \
                 (D={}, D_roi={}, D_st={}, H={heads}, d_raw={})",
                self.dim,
                self.d_roi,
                self.d_st,
                self.heads,
                self.d_raw,
                dims.fused(),
                dims.d_roi,
                dims.d_st,
                dims.d_raw
            )));
        }
        Ok(())
    }
}

pub fn encode(p: &GmtParams) -> Vec<u8> {
    let h = WeightsHeader::of(p);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [h.dim, h.d_roi, h.d_st, h.heads, h.d_raw, h.hidden_roi, h.hidden_st, h.d_ff] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let tensors = p.tensors();
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u64).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.data.len() as u64).to_le_bytes());
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> std::result::Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|e| e.to_string())
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<GmtParams, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("not a weights file (bad magic)".into());
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format!("unsupported weights version {version}"));
    }
    let mut f = [0usize; 8];
    for v in &mut f {
        *v = r.usize()?;
    }
    let h = WeightsHeader {
        dim: f[0],
        d_roi: f[1],
        d_st: f[2],
        heads: f[3],
        d_raw: f[4],
        hidden_roi: f[5],
        hidden_st: f[6],
        d_ff: f[7],
    };
    if h.dim != h.d_roi + h.d_st || h.d_ff != 4 * h.dim {
        return Err(format!("inconsistent header {h:?}"));
    }
    let mut p = GmtParams::init(&h.feature_dims(), h.heads, 0).map_err(|e| e.to_string())?;
    let count = r.usize()?;
    let mut slots = p.tensors_mut();
    if count != slots.len() {
        return Err(format!("expected {} tensors, found {count}", slots.len()));
    }
    for slot in &mut slots {
        let n = r.usize()?;
        let name = std::str::from_utf8(r.take(n)?).map_err(|e| e.to_string())?;
        if name != slot.name {
            return Err(format!("expected tensor `{}`, found `{name}`", slot.name));
        }
        let len = r.usize()?;
        if len != slot.data.len() {
            return Err(format!("tensor `{name}` has {len} values, expected {}", slot.data.len()));
        }
        for v in slot.data.iter_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        }
    }
    drop(slots);
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(p)
}

pub fn write_weights(path: &Path, p: &GmtParams) -> Result<()> {
    fs::write(path, encode(p)).map_err(|e| CliError::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<GmtParams> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|msg| CliError::Data(format!("{}: {msg}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let p = GmtParams::init(&FeatureDims::desk(), 8, 5).unwrap();
        let q = decode(&encode(&p)).unwrap();
        assert_eq!(p, q);
        let h = WeightsHeader::of(&q);
        assert_eq!((h.dim, h.d_roi, h.d_st, h.heads), (72, 64, 8, 8));
        assert!(h.check(&FeatureDims::desk(), 8).is_ok());
        assert!(h.check(&FeatureDims::desk(), 4).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = GmtParams::init(&FeatureDims::desk(), 8, 5).unwrap();
        let bytes = encode(&p);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"nope").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad_version = bytes;
        bad_version[4] = 9;
        assert!(decode(&bad_version).is_err());
    }
}
