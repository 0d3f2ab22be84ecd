use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::PatchBag;
use crate::error::{Error, Result};

pub const BAG_MAGIC: &[u8; 8] = b"COBRABAG";
pub const BAG_VERSION: u16 = 1;
const DTYPE_F32_LE: u8 = 1;

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

/// Serializes a bag: magic, version, dtype code, ids, magnification,
/// shape, then the row-major little-endian `f32` payload.
pub fn encode_bag(bag: &PatchBag) -> Result<Vec<u8>> {
    bag.validate()?;
    let mut buf = Vec::with_capacity(64 + bag.features.len() * 4);
    buf.extend_from_slice(BAG_MAGIC);
    buf.extend_from_slice(&BAG_VERSION.to_le_bytes());
    buf.push(DTYPE_F32_LE);
    buf.push(0);
    put_str(&mut buf, &bag.patient_id);
    put_str(&mut buf, &bag.slide_id);
    put_str(&mut buf, &bag.extractor_id);
    buf.extend_from_slice(&bag.magnification_mpp.to_le_bytes());
    buf.extend_from_slice(&(bag.n_tiles() as u64).to_le_bytes());
    buf.extend_from_slice(&(bag.dim() as u64).to_le_bytes());
    for v in bag.features.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptHeader("header truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = u32::from_le_bytes(self.array()?) as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::CorruptHeader(format!("{what} is not UTF-8")))
    }
}

pub fn decode_bag(bytes: &[u8]) -> Result<PatchBag> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != BAG_MAGIC {
        return Err(Error::CorruptHeader("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.array()?);
    if version != BAG_VERSION {
        return Err(Error::CorruptHeader(format!("unsupported version {version}")));
    }
    let [dtype, _reserved] = r.array::<2>()?;
    if dtype != DTYPE_F32_LE {
        return Err(Error::CorruptHeader(format!("unknown dtype code {dtype}")));
    }
    let patient_id = r.string("patient id")?;
    let slide_id = r.string("slide id")?;
    let extractor_id = r.string("extractor id")?;
    let magnification_mpp = f64::from_le_bytes(r.array()?);
    let n_tiles = u64::from_le_bytes(r.array()?) as usize;
    let dim = u64::from_le_bytes(r.array()?) as usize;
    if n_tiles == 0 || dim == 0 {
        return Err(Error::CorruptHeader(format!("empty shape {n_tiles}×{dim}")));
    }
    if !magnification_mpp.is_finite() || magnification_mpp <= 0.0 {
        return Err(Error::CorruptHeader(format!("bad magnification {magnification_mpp}")));
    }
    let expected = n_tiles
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::CorruptHeader("shape overflows".into()))?;
    let payload = &bytes[r.pos..];
    if payload.len() < expected {
        return Err(Error::PayloadTruncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::ShapeMismatch(format!(
            "header declares {n_tiles}×{dim} ({expected} bytes) but payload has {} bytes",
            payload.len()
        )));
    }
    let mut values = Vec::with_capacity(n_tiles * dim);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
        if !v.is_finite() {
            return Err(Error::NonFinite {
                row: i / dim,
                col: i % dim,
            });
        }
        values.push(v);
    }
    let features = Array2::from_shape_vec((n_tiles, dim), values).expect("length checked");
    Ok(PatchBag {
        patient_id,
        slide_id,
        extractor_id,
        magnification_mpp,
        features,
    })
}

pub fn write_bag(bag: &PatchBag, path: &Path) -> Result<()> {
    let bytes = encode_bag(bag)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bag(path: &Path) -> Result<PatchBag> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bag(&bytes)
}
