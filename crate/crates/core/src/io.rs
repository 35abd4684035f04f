//! On-disk formats: probability maps, weight checkpoints and metric CSVs.
//!
//! Maps (`L2LM`) and checkpoints (`L2LW`) are little-endian binary files
//! with a four-byte magic and a `u32` version; values are stored as `f32`.
//! CSVs are comma separated with a `# config_hash=<hex>` comment line above
//! the header.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::probmaps::{BinaryMask, ProbMap};
use crate::tensorcore::Tensor;

pub const MAP_MAGIC: &[u8; 4] = b"L2LM";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"L2LW";
pub const FORMAT_VERSION: u32 = 1;

fn bad(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| bad(self.path, "truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| bad(self.path, "length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(bad(self.path, "wrong magic"));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(bad(self.path, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(bad(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Values are rounded to `f32`.
pub fn encode_map(map: &ProbMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * map.len());
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for v in map.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn write_map(path: &Path, map: &ProbMap) -> Result<()> {
    fs::write(path, encode_map(map))?;
    Ok(())
}

pub fn read_map(path: &Path) -> Result<ProbMap> {
    let buf = read_all(path)?;
    let mut r = Reader { path, buf: &buf, pos: 0 };
    r.header(MAP_MAGIC)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let values = r.f32s(h * w)?;
    r.finish()?;
    ProbMap::new(h, w, values).map_err(|e| bad(path, e.to_string()))
}

/// Masks share the map format with values 0 and 1.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_map(path, &mask.to_prob_map())
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let m = read_map(path)?;
    if m.values().iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(bad(path, "mask values must be 0 or 1"));
    }
    Ok(m.binarize(0.5))
}

/// Named tensors, in order, rounded to `f32`.
pub fn write_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = read_all(path)?;
    let mut r = Reader { path, buf: &buf, pos: 0 };
    r.header(CHECKPOINT_MAGIC)?;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| bad(path, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| bad(path, "shape overflow"))?;
        let data = r.f32s(n)?;
        let t = Tensor::new(&shape, data).map_err(|e| bad(path, e.to_string()))?;
        out.push((name, t));
    }
    r.finish()?;
    Ok(out)
}

/// CSV text with the config-hash comment line, header and rows.
pub fn csv_text(config_hash: &str, header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = format!("# config_hash={config_hash}\n");
    s.push_str(&header.join(","));
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

pub fn write_csv(path: &Path, config_hash: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(csv_text(config_hash, header, rows).as_bytes())?;
    Ok(())
}

/// The CSV body without `#` comment lines.
pub fn csv_body(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect()
}
