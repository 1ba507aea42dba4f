//! Multi-band rasters, the RSRB container format, and patch extraction.
//!
//! RSRB v1 layout (little-endian): magic `RSRB`, u16 version, u8 dtype
//! (0 = float32, 1 = uint8), u16 bands, u32 width, u32 height, then the
//! payload band-major, row-major.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;

pub const RSRB_MAGIC: [u8; 4] = *b"RSRB";
pub const RSRB_VERSION: u16 = 1;
const HEADER_LEN: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    Float32,
    Uint8,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::Float32 => 0,
            DType::Uint8 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::Float32),
            1 => Ok(DType::Uint8),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Uint8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RasterData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

/// A multi-band 2-D image, band-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    bands: usize,
    data: RasterData,
}

impl Raster {
    pub fn new_f32(width: usize, height: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(width, height, bands, RasterData::F32(data))
    }

    pub fn new_u8(width: usize, height: usize, bands: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, bands, RasterData::U8(data))
    }

    pub fn new(width: usize, height: usize, bands: usize, data: RasterData) -> Result<Self> {
        if width == 0 || height == 0 || bands == 0 {
            return Err(Error::Shape(format!(
                "raster dimensions must be positive, got {width}x{height}x{bands}"
            )));
        }
        let expected = width * height * bands;
        let len = match &data {
            RasterData::F32(v) => v.len(),
            RasterData::U8(v) => v.len(),
        };
        if len != expected {
            return Err(Error::Shape(format!(
                "raster {width}x{height}x{bands} needs {expected} values, got {len}"
            )));
        }
        Ok(Raster {
            width,
            height,
            bands,
            data,
        })
    }

    pub fn zeros_f32(width: usize, height: usize, bands: usize) -> Result<Self> {
        Self::new_f32(width, height, bands, vec![0.0; width * height * bands])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            RasterData::F32(_) => DType::Float32,
            RasterData::U8(_) => DType::Uint8,
        }
    }

    pub fn data(&self) -> &RasterData {
        &self.data
    }

    pub fn pixels_per_band(&self) -> usize {
        self.width * self.height
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            RasterData::F32(v) => Ok(v),
            RasterData::U8(_) => Err(Error::Type("expected a float32 raster".into())),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32]> {
        match &mut self.data {
            RasterData::F32(v) => Ok(v),
            RasterData::U8(_) => Err(Error::Type("expected a float32 raster".into())),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            RasterData::U8(v) => Ok(v),
            RasterData::F32(_) => Err(Error::Type("expected a uint8 raster".into())),
        }
    }

    pub fn band_f32(&self, band: usize) -> Result<&[f32]> {
        let n = self.pixels_per_band();
        Ok(&self.as_f32()?[band * n..(band + 1) * n])
    }

    /// Pixel value as f32 regardless of storage type.
    pub fn get(&self, band: usize, row: usize, col: usize) -> f32 {
        let idx = (band * self.height + row) * self.width + col;
        match &self.data {
            RasterData::F32(v) => v[idx],
            RasterData::U8(v) => v[idx] as f32,
        }
    }

    /// Converts to float32 storage (no-op copy for float rasters).
    pub fn to_f32(&self) -> Raster {
        let data = match &self.data {
            RasterData::F32(v) => v.clone(),
            RasterData::U8(v) => v.iter().map(|&x| x as f32).collect(),
        };
        Raster {
            width: self.width,
            height: self.height,
            bands: self.bands,
            data: RasterData::F32(data),
        }
    }

    /// True when this is a uint8 raster holding only 0 and 1.
    pub fn is_binary_mask(&self) -> bool {
        match &self.data {
            RasterData::U8(v) => v.iter().all(|&x| x <= 1),
            RasterData::F32(_) => false,
        }
    }

    pub fn same_size(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dtype = self.dtype();
        let mut out = Vec::with_capacity(HEADER_LEN + self.data_len() * dtype.size());
        out.extend_from_slice(&RSRB_MAGIC);
        out.extend_from_slice(&RSRB_VERSION.to_le_bytes());
        out.push(dtype.code());
        out.extend_from_slice(&(self.bands as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        match &self.data {
            RasterData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            RasterData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && bytes[..4] != RSRB_MAGIC {
                return Err(Error::Format("bad magic, not an RSRB file".into()));
            }
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if bytes[..4] != RSRB_MAGIC {
            return Err(Error::Format("bad magic, not an RSRB file".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != RSRB_VERSION {
            return Err(Error::Format(format!("unsupported RSRB version {version}")));
        }
        let dtype = DType::from_code(bytes[6])?;
        let bands = u16::from_le_bytes([bytes[7], bytes[8]]) as usize;
        let width = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
        if width == 0 || height == 0 || bands == 0 {
            return Err(Error::Format(format!(
                "header declares empty raster {width}x{height}x{bands}"
            )));
        }
        let count = width * height * bands;
        let payload = &bytes[HEADER_LEN..];
        let expected = count * dtype.size();
        if payload.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                payload.len() - expected
            )));
        }
        let data = match dtype {
            DType::Float32 => RasterData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::Uint8 => RasterData::U8(payload.to_vec()),
        };
        Raster::new(width, height, bands, data)
    }

    fn data_len(&self) -> usize {
        self.width * self.height * self.bands
    }
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Raster::from_bytes(&bytes)
}

pub fn write_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    fsutil::write_atomic(path.as_ref(), &raster.to_bytes())
}

/// Standardizes every band to zero mean and unit (population) standard
/// deviation. Constant bands become all zeros.
pub fn standardize_bands(raster: &Raster) -> Result<Raster> {
    let src = raster
        .as_f32()
        .map_err(|_| Error::Type("standardize_bands needs a float32 raster".into()))?;
    let n = raster.pixels_per_band();
    let mut out = Vec::with_capacity(src.len());
    for band in src.chunks_exact(n) {
        let first = band[0];
        if band.iter().all(|&x| x == first) {
            out.extend(std::iter::repeat_n(0.0f32, n));
            continue;
        }
        let mean = band.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let var = band
            .iter()
            .map(|&x| {
                let d = x as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        out.extend(band.iter().map(|&x| ((x as f64 - mean) / std) as f32));
    }
    Raster::new_f32(raster.width, raster.height, raster.bands, out)
}

/// A square window of a raster, `bands x side x side`, centered on `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: Vec<f32>,
    pub bands: usize,
    pub side: usize,
    /// (row, col) of the center pixel in the source raster.
    pub origin: (usize, usize),
}

impl Patch {
    pub fn get(&self, band: usize, row: usize, col: usize) -> f32 {
        self.pixels[(band * self.side + row) * self.side + col]
    }
}

/// Maps a possibly out-of-range coordinate into `0..n` by mirror
/// reflection about the edge pixels (edge not repeated).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

pub fn validate_patch_side(p: usize) -> Result<()> {
    if p < 4 || p % 2 != 0 {
        return Err(Error::Parameter(format!(
            "patch side must be even and at least 4, got {p}"
        )));
    }
    Ok(())
}

/// Extracts the `p x p` window whose pixel `(p/2, p/2)` is raster pixel
/// `(r, c)`; rows `r - p/2 ..= r + p/2 - 1`. Borders are reflect padded.
pub fn extract_patch(raster: &Raster, r: usize, c: usize, p: usize) -> Result<Patch> {
    validate_patch_side(p)?;
    if r >= raster.height || c >= raster.width {
        return Err(Error::Bounds(format!(
            "pixel ({r}, {c}) outside {}x{} raster",
            raster.height, raster.width
        )));
    }
    let half = (p / 2) as isize;
    let mut pixels = Vec::with_capacity(raster.bands * p * p);
    for b in 0..raster.bands {
        for i in 0..p as isize {
            let row = reflect_index(r as isize - half + i, raster.height);
            for j in 0..p as isize {
                let col = reflect_index(c as isize - half + j, raster.width);
                pixels.push(raster.get(b, row, col));
            }
        }
    }
    Ok(Patch {
        pixels,
        bands: raster.bands,
        side: p,
        origin: (r, c),
    })
}

/// A float copy of a raster with `pad` reflected pixels on every side, for
/// extracting many windows without per-pixel index arithmetic.
#[derive(Debug, Clone)]
pub struct ReflectPadded {
    data: Vec<f32>,
    bands: usize,
    pad: usize,
    padded_w: usize,
    padded_h: usize,
}

impl ReflectPadded {
    pub fn new(raster: &Raster, pad: usize) -> Self {
        let padded_w = raster.width + 2 * pad;
        let padded_h = raster.height + 2 * pad;
        let mut data = Vec::with_capacity(raster.bands * padded_w * padded_h);
        for b in 0..raster.bands {
            for i in 0..padded_h {
                let row = reflect_index(i as isize - pad as isize, raster.height);
                for j in 0..padded_w {
                    let col = reflect_index(j as isize - pad as isize, raster.width);
                    data.push(raster.get(b, row, col));
                }
            }
        }
        ReflectPadded {
            data,
            bands: raster.bands,
            pad,
            padded_w,
            padded_h,
        }
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    /// Writes the window matching `extract_patch(r, c, p)` into `out`
    /// (length `bands * p * p`). Requires `p / 2 <= pad`.
    pub fn copy_window(&self, r: usize, c: usize, p: usize, out: &mut [f32]) {
        debug_assert!(p / 2 <= self.pad);
        debug_assert_eq!(out.len(), self.bands * p * p);
        let top = r + self.pad - p / 2;
        let left = c + self.pad - p / 2;
        for b in 0..self.bands {
            for i in 0..p {
                let src = (b * self.padded_h + top + i) * self.padded_w + left;
                let dst = (b * p + i) * p;
                out[dst..dst + p].copy_from_slice(&self.data[src..src + p]);
            }
        }
    }
}
