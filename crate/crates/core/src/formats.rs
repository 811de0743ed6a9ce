//! Little-endian container formats and atomic file output.
//!
//! * `TSIN`: magic, u32 version, u32 n_proj, n_rows, n_chan, u8 scan mode
//!   (0 normal, 1 offset), i32 offset_chan, f32 angle_span, f32
//!   pixel_pitch, then f32 samples angle-major.
//! * `TVOL`: magic, u32 nx, ny, nz, f32 voxel_pitch, then u16 voxels z-major.
//! * `TMK2`: magic, u32 nx, ny, nz, u8 bits (= 2), then the packed payload.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{AcquisitionParams, ScanMode};
use crate::segfuse::BitmapMask;
use crate::volume::{Sinogram, Volume};

pub const SINO_MAGIC: &[u8; 4] = b"TSIN";
pub const VOL_MAGIC: &[u8; 4] = b"TVOL";
pub const MASK_MAGIC: &[u8; 4] = b"TMK2";
pub const SINO_VERSION: u32 = 1;

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| with_path(e, dir))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| with_path(e.error, path))?;
    Ok(())
}

fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| with_path(e, path))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != magic {
            return Err(Error::Format(format!(
                "{what}: bad magic, expected {:?}",
                std::str::from_utf8(magic).unwrap()
            )));
        }
        Ok(Self { buf, pos: 4, what })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("{}: truncated header", self.what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// The remaining bytes, which must be exactly `n`.
    fn payload(&self, n: usize) -> Result<&'a [u8]> {
        let rest = &self.buf[self.pos..];
        if rest.len() != n {
            return Err(Error::Format(format!("{}: payload of {} bytes, header implies {n}", self.what, rest.len())));
        }
        Ok(rest)
    }
}

pub fn encode_sinogram(s: &Sinogram) -> Result<Vec<u8>> {
    if !s.is_full() {
        return Err(Error::Dimension("only full sinograms can be stored".into()));
    }
    let p = &s.params;
    let mut b = Vec::with_capacity(33 + 4 * s.data().len());
    b.extend_from_slice(SINO_MAGIC);
    for v in [SINO_VERSION, p.n_proj as u32, p.n_rows as u32, p.n_chan as u32] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.push(match p.scan_mode {
        ScanMode::Normal => 0,
        ScanMode::Offset => 1,
    });
    b.extend_from_slice(&p.offset_chan.to_le_bytes());
    b.extend_from_slice(&(p.angle_span as f32).to_le_bytes());
    b.extend_from_slice(&(p.pixel_pitch as f32).to_le_bytes());
    for v in s.data() {
        b.extend_from_slice(&v.to_le_bytes());
    }
    Ok(b)
}

pub fn decode_sinogram(buf: &[u8]) -> Result<Sinogram> {
    let mut r = Reader::new(buf, SINO_MAGIC, "sinogram")?;
    let version = r.u32()?;
    if version != SINO_VERSION {
        return Err(Error::Format(format!("sinogram: unsupported version {version}")));
    }
    let (n_proj, n_rows, n_chan) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let mode = r.u8()?;
    let offset = r.i32()?;
    let span = r.f32()?;
    let pitch = r.f32()? as f64;
    let params = match mode {
        0 => AcquisitionParams::normal(n_proj, n_rows, n_chan, pitch),
        1 => AcquisitionParams::offset(n_proj, n_rows, n_chan, pitch, offset),
        m => return Err(Error::Format(format!("sinogram: unknown scan mode {m}"))),
    }
    .map_err(|e| Error::Format(format!("sinogram: {e}")))?;
    if span != params.angle_span as f32 {
        return Err(Error::Format(format!("sinogram: angle span {span} does not match the scan mode")));
    }
    let n = n_proj
        .checked_mul(n_rows)
        .and_then(|v| v.checked_mul(n_chan))
        .ok_or_else(|| Error::Format("sinogram: header dimensions overflow".into()))?;
    let data = r.payload(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Sinogram::new(params, data)
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut b = Vec::with_capacity(20 + 2 * v.data.len());
    b.extend_from_slice(VOL_MAGIC);
    for d in [v.nx, v.ny, v.nz] {
        b.extend_from_slice(&(d as u32).to_le_bytes());
    }
    b.extend_from_slice(&v.voxel_pitch.to_le_bytes());
    for x in &v.data {
        b.extend_from_slice(&x.to_le_bytes());
    }
    b
}

pub fn decode_volume(buf: &[u8]) -> Result<Volume> {
    let mut r = Reader::new(buf, VOL_MAGIC, "volume")?;
    let (nx, ny, nz) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let voxel_pitch = r.f32()?;
    let n = nx * ny * nz;
    let data = r.payload(2 * n)?.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    Ok(Volume { nx, ny, nz, voxel_pitch, data })
}

pub fn encode_mask(m: &BitmapMask) -> Vec<u8> {
    let mut b = Vec::with_capacity(17 + m.payload.len());
    b.extend_from_slice(MASK_MAGIC);
    for d in [m.nx, m.ny, m.nz] {
        b.extend_from_slice(&(d as u32).to_le_bytes());
    }
    b.push(2);
    b.extend_from_slice(&m.payload);
    b
}

pub fn decode_mask(buf: &[u8]) -> Result<BitmapMask> {
    let mut r = Reader::new(buf, MASK_MAGIC, "mask")?;
    let (nx, ny, nz) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let bits = r.u8()?;
    if bits != 2 {
        return Err(Error::Format(format!("mask: {bits} bits per voxel, expected 2")));
    }
    let payload = r.payload((nx * ny * nz).div_ceil(4))?.to_vec();
    Ok(BitmapMask { nx, ny, nz, payload })
}

pub fn write_sinogram(path: &Path, s: &Sinogram) -> Result<()> {
    write_atomic(path, &encode_sinogram(s)?)
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    decode_sinogram(&read_file(path)?).map_err(|e| in_file(e, path))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_atomic(path, &encode_volume(v))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&read_file(path)?).map_err(|e| in_file(e, path))
}

pub fn write_mask(path: &Path, m: &BitmapMask) -> Result<()> {
    write_atomic(path, &encode_mask(m))
}

pub fn read_mask(path: &Path) -> Result<BitmapMask> {
    decode_mask(&read_file(path)?).map_err(|e| in_file(e, path))
}

fn in_file(e: Error, path: &Path) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// 8-bit binary PGM of slice `z`, scaled from the full uint16 range.
pub fn pgm_slice(v: &Volume, z: usize) -> Result<Vec<u8>> {
    if z >= v.nz {
        return Err(Error::Param(format!("slice {z} outside volume of {} slices", v.nz)));
    }
    let mut b = format!("P5\n{} {}\n255\n", v.nx, v.ny).into_bytes();
    b.extend(v.slice(z).iter().map(|&x| (x >> 8) as u8));
    Ok(b)
}
