//! `DRS1` container for [`DressCsr`].
//!
//! Little-endian layout:
//!
//! ```text
//! "DRS1" version:u32 K:u32 layers:u32
//! per layer:
//!   name_len:u16 name:utf8 H:u32 N:u32 prefix:u32[K] width:u8
//!   index:(u8|u16)[H * prefix[0]] value:f32[H * prefix[0]]
//! bn_layers:u32 channels:u32[bn_layers]
//! per level, per BN layer: scale:f32[C] shift:f32[C] mean:f32[C] var:f32[C]
//! levels:f64[K]
//! per layer: has_bias:u8 [bias:f32[H]]
//! arch_len:u32 arch:json
//! crc32:u32 over every preceding byte
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::csr::format::{DressCsr, DressCsrLayer};
use crate::error::{DressError, Result};
use crate::net::params::BnParams;
use crate::net::spec::NetworkSpec;

const MAGIC: &[u8; 4] = b"DRS1";
const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| DressError::format(format!("{} does not fit in u32", v)))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| DressError::format("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n.checked_mul(4).ok_or_else(|| DressError::format("length overflow"))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

fn index_width(row_len: usize) -> Result<u8> {
    match row_len {
        0..=256 => Ok(1),
        257..=65536 => Ok(2),
        _ => Err(DressError::format(format!("row size {} exceeds 16-bit indices", row_len))),
    }
}

impl DressCsr {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let k = self.k();
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION as usize)?;
        w.u32(k)?;
        w.u32(self.layers.len())?;
        for l in &self.layers {
            let name = l.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| DressError::format("layer name too long"))?;
            w.u16(len);
            w.buf.extend_from_slice(name);
            w.u32(l.rows)?;
            w.u32(l.row_len)?;
            for &c in &l.prefix_counts {
                w.u32(c)?;
            }
            let width = index_width(l.row_len)?;
            w.u8(width);
            for &c in &l.indices {
                if width == 1 {
                    w.u8(c as u8);
                } else {
                    w.u16(c as u16);
                }
            }
            w.f32s(&l.values);
        }
        let channels: Vec<usize> = self.bn_variants.first().map(|v| v.iter().map(|b| b.channels()).collect()).unwrap_or_default();
        w.u32(channels.len())?;
        for &c in &channels {
            w.u32(c)?;
        }
        for variant in &self.bn_variants {
            for b in variant {
                w.f32s(&b.gamma);
                w.f32s(&b.beta);
                w.f32s(&b.running_mean);
                w.f32s(&b.running_var);
            }
        }
        for s in &self.levels {
            w.buf.extend_from_slice(&s.to_le_bytes());
        }
        for l in &self.layers {
            match &l.bias {
                Some(b) => {
                    w.u8(1);
                    w.f32s(b);
                }
                None => w.u8(0),
            }
        }
        let arch = serde_json::to_vec(&self.network)?;
        w.u32(arch.len())?;
        w.buf.extend_from_slice(&arch);
        let crc = crc32fast::hash(&w.buf);
        w.buf.extend_from_slice(&crc.to_le_bytes());
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(DressError::format("bad magic, not a DRS1 file"));
        }
        if bytes.len() < 20 {
            return Err(DressError::format("truncated file"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
        if crc32fast::hash(body) != stored {
            return Err(DressError::format("checksum mismatch (corrupt or truncated file)"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(DressError::format(format!("unsupported version {}", version)));
        }
        let k = r.u32()?;
        let n_layers = r.u32()?;
        if k == 0 {
            return Err(DressError::format("zero levels"));
        }
        let mut layers = Vec::with_capacity(n_layers.min(1 << 16));
        for _ in 0..n_layers {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| DressError::format("layer name is not UTF-8"))?;
            let rows = r.u32()?;
            let row_len = r.u32()?;
            let prefix_counts = (0..k).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            if prefix_counts.windows(2).any(|p| p[1] > p[0]) {
                return Err(DressError::format(format!(
                    "layer {}: prefix counts {:?} are not non-increasing",
                    name, prefix_counts
                )));
            }
            if prefix_counts[0] > row_len {
                return Err(DressError::format(format!("layer {}: prefix exceeds row size", name)));
            }
            let width = r.u8()?;
            if width != index_width(row_len)? {
                return Err(DressError::format(format!("layer {}: index width {}", name, width)));
            }
            let n = rows
                .checked_mul(prefix_counts[0])
                .ok_or_else(|| DressError::format("table size overflow"))?;
            let raw = r.take(n.checked_mul(width as usize).ok_or_else(|| DressError::format("table size overflow"))?)?;
            let indices: Vec<u32> = if width == 1 {
                raw.iter().map(|&b| b as u32).collect()
            } else {
                raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32).collect()
            };
            let values = r.f32s(n)?;
            layers.push(DressCsrLayer {
                name,
                layer: 0,
                rows,
                row_len,
                prefix_counts,
                indices,
                values,
                bias: None,
            });
        }
        let n_bn = r.u32()?;
        let channels = (0..n_bn).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let mut bn_variants = Vec::with_capacity(k);
        for _ in 0..k {
            let mut variant = Vec::with_capacity(n_bn);
            for &c in &channels {
                variant.push(BnParams {
                    gamma: r.f32s(c)?,
                    beta: r.f32s(c)?,
                    running_mean: r.f32s(c)?,
                    running_var: r.f32s(c)?,
                });
            }
            bn_variants.push(variant);
        }
        let levels = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        for l in layers.iter_mut() {
            match r.u8()? {
                0 => {}
                1 => l.bias = Some(r.f32s(l.rows)?),
                f => return Err(DressError::format(format!("bad bias flag {}", f))),
            }
        }
        let arch_len = r.u32()?;
        let network: NetworkSpec = serde_json::from_slice(r.take(arch_len)?)
            .map_err(|e| DressError::format(format!("architecture section: {}", e)))?;
        if r.pos != body.len() {
            return Err(DressError::format("trailing bytes before checksum"));
        }
        let sampled = network.sampled_layers();
        if sampled.len() != layers.len() {
            return Err(DressError::format("layer count differs from the architecture"));
        }
        for (l, i) in layers.iter_mut().zip(sampled) {
            l.layer = i;
        }
        let out = DressCsr {
            network,
            levels,
            layers,
            bn_variants,
        };
        out.validate().map_err(|e| DressError::format(e.to_string()))?;
        Ok(out)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
