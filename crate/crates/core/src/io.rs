//! Raster persistence: a portable float32 format for precision maps and
//! σ fields, plus 8-bit grayscale PNG for images (behind the `png` feature).
//!
//! Float32 layout: 8-byte magic `F32RAST\0`, u32 height, u32 width (both
//! little-endian), then height·width row-major little-endian f32 values.
//! Write-then-read is bitwise exact.
//!
//! PNG convention: read maps v ↦ v/255; write maps v ↦ round(clamp(v,0,1)·255)
//! with round-half-up, so a constant 0.5 raster becomes 128/255.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::graph::Tensor;
use crate::nn::ParamSet;
use crate::raster::Raster;

pub const F32_MAGIC: &[u8; 8] = b"F32RAST\0";

pub fn write_f32(path: &Path, raster: &Raster) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + raster.len() * 4);
    buf.extend_from_slice(F32_MAGIC);
    buf.extend_from_slice(&(raster.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(raster.width() as u32).to_le_bytes());
    for v in raster.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &buf)
}

pub fn read_f32(path: &Path) -> Result<Raster> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header)
        .map_err(|e| Error::io(path, format!("truncated header: {e}")))?;
    if &header[0..8] != F32_MAGIC {
        return Err(Error::io(path, "bad magic, not a float32 raster"));
    }
    let height = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() != height * width * 4 {
        return Err(Error::io(
            path,
            format!("payload is {} bytes, expected {} for {}x{}", payload.len(), height * width * 4, height, width),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Raster::from_vec(height, width, data).map_err(|e| Error::io(path, e))
}

/// Writes to a sibling temp file then renames, so readers never observe a
/// partially written artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Quantizes one intensity to 8 bits: clamp to [0,1], scale, round half up.
pub fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) as f64 * 255.0).round() as u8
}

#[cfg(feature = "png")]
pub fn write_png(path: &Path, raster: &Raster) -> Result<()> {
    let pixels: Vec<u8> = raster.as_slice().iter().map(|&v| quantize8(v)).collect();
    let img = image::GrayImage::from_raw(raster.width() as u32, raster.height() as u32, pixels)
        .ok_or_else(|| Error::io(path, "raster to image buffer conversion failed"))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    img.save(path).map_err(|e| Error::io(path, e))
}

#[cfg(feature = "png")]
pub fn read_png(path: &Path) -> Result<Raster> {
    let img = image::open(path).map_err(|e| Error::io(path, e))?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Raster::from_vec(h, w, data).map_err(|e| Error::io(path, e))
}

/// Mask PNG convention: ventricle pixels 255, septum pixels 127, rest 0.
#[cfg(feature = "png")]
pub fn write_mask_png(path: &Path, ventricle: &Raster, septum: &Raster) -> Result<()> {
    ventricle
        .check_same_shape(septum, "mask png")
        .map_err(|e| Error::io(path, e))?;
    let combined = ventricle
        .zip_map(septum, |v, s| if v != 0.0 { 1.0 } else if s != 0.0 { 127.0 / 255.0 } else { 0.0 })
        .map_err(|e| Error::io(path, e))?;
    write_png(path, &combined)
}

#[cfg(feature = "png")]
pub fn read_mask_png(path: &Path) -> Result<(Raster, Raster)> {
    let raw = read_png(path)?;
    let ventricle = raw.map(|v| if (v * 255.0).round() as u8 == 255 { 1.0 } else { 0.0 });
    let septum = raw.map(|v| if (v * 255.0).round() as u8 == 127 { 1.0 } else { 0.0 });
    Ok((ventricle, septum))
}

/// Little-endian binary builder shared by the checkpoint formats.
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new(magic: &[u8; 8]) -> Self {
        ByteWriter { buf: magic.to_vec() }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str8(&mut self, s: &str) {
        assert!(s.len() <= u8::MAX as usize, "string too long for str8");
        self.u8(s.len() as u8);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn params(&mut self, p: &ParamSet) {
        self.u32(p.entries.len() as u32);
        for (name, t) in &p.entries {
            self.str8(name);
            let [n, c, h, w] = t.dims();
            self.u32(n as u32);
            self.u32(c as u32);
            self.u32(h as u32);
            self.u32(w as u32);
            self.f32s(&t.data);
        }
    }
}

/// Bounds-checked reader for the same formats; every failure names the file.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], magic: &[u8; 8], path: &'a Path) -> Result<Self> {
        if buf.len() < 8 || &buf[..8] != magic {
            return Err(Error::io(path, "bad magic"));
        }
        Ok(ByteReader { buf, pos: 8, path })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::io(self.path, "truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str8(&mut self) -> Result<String> {
        let len = self.u8()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::io(self.path, "invalid utf-8"))
    }

    pub fn params(&mut self) -> Result<ParamSet> {
        let count = self.u32()? as usize;
        let mut p = ParamSet::new();
        for _ in 0..count {
            let name = self.str8()?;
            let (n, c, h, w) =
                (self.u32()? as usize, self.u32()? as usize, self.u32()? as usize, self.u32()? as usize);
            let numel = n * c * h * w;
            let bytes = self.take(numel * 4)?;
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let t = Tensor::from_vec(n, c, h, w, data)
                .map_err(|e| Error::io(self.path, format!("bad tensor '{name}': {e}")))?;
            p.push(&name, t);
        }
        Ok(p)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::io(self.path, "trailing bytes after payload"));
        }
        Ok(())
    }
}
