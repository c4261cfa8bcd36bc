//! Minimal single-file NIfTI-1 (`.nii`) reader, plus a writer used to build
//! fixtures and to export predictions.
//!
//! NIfTI stores `x` fastest; the grid is returned as `(D, H, W) = (z, y, x)`
//! so its flat layout matches every other volume in this crate.

use std::fs;
use std::path::Path;

use crate::error::DataError;

pub const HEADER_SIZE: usize = 348;
pub const DEFAULT_VOX_OFFSET: usize = 352;
pub const MAGIC: [u8; 4] = *b"n+1\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NiftiDatatype {
    U8,
    I16,
    F32,
}

impl NiftiDatatype {
    pub fn code(self) -> i16 {
        match self {
            NiftiDatatype::U8 => 2,
            NiftiDatatype::I16 => 4,
            NiftiDatatype::F32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(NiftiDatatype::U8),
            4 => Some(NiftiDatatype::I16),
            16 => Some(NiftiDatatype::F32),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            NiftiDatatype::U8 => 1,
            NiftiDatatype::I16 => 2,
            NiftiDatatype::F32 => 4,
        }
    }
}

/// One decoded image: intensities after `scl_slope`/`scl_inter` scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiImage {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub datatype: NiftiDatatype,
    pub data: Vec<f32>,
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    parse_nifti(&bytes, path)
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn raw<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[at..at + N]);
        if let Endian::Big = self.endian {
            b.reverse();
        }
        b
    }

    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.raw(at))
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.raw(at))
    }
}

pub fn parse_nifti(bytes: &[u8], path: &Path) -> Result<NiftiImage, DataError> {
    let header_err = |reason: String| DataError::NiftiHeader {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.starts_with(&[0x1f, 0x8b]) {
        return Err(DataError::Compressed { path: path.to_path_buf() });
    }
    if bytes.len() < HEADER_SIZE {
        return Err(header_err(format!("file is {} bytes, shorter than the 348-byte header", bytes.len())));
    }
    let size = [bytes[0], bytes[1], bytes[2], bytes[3]];
    let endian = if i32::from_le_bytes(size) == HEADER_SIZE as i32 {
        Endian::Little
    } else if i32::from_be_bytes(size) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(header_err(format!("sizeof_hdr is {}, expected 348", i32::from_le_bytes(size))));
    };
    if bytes[344..348] != MAGIC {
        return Err(header_err(format!("magic {:?}, expected \"n+1\\0\"", &bytes[344..348])));
    }
    let r = Reader { bytes, endian };

    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(header_err(format!("dim[0] = {ndim} outside 1..=7")));
    }
    let mut xyz = [1usize; 3];
    for i in 1..=ndim as usize {
        let d = r.i16(40 + 2 * i);
        if d < 1 {
            return Err(header_err(format!("dim[{i}] = {d}")));
        }
        if i <= 3 {
            xyz[i - 1] = d as usize;
        } else if d != 1 {
            return Err(header_err(format!("dim[{i}] = {d}; only 3-D volumes are supported")));
        }
    }

    let code = r.i16(70);
    let datatype = NiftiDatatype::from_code(code).ok_or(DataError::NiftiDatatype {
        path: path.to_path_buf(),
        code,
    })?;

    let pix = [r.f32(80), r.f32(84), r.f32(88)].map(|p| if p > 0.0 && p.is_finite() { p as f64 } else { 1.0 });
    let vox_offset = r.f32(108);
    if vox_offset.is_nan() || vox_offset < HEADER_SIZE as f32 || vox_offset.fract() != 0.0 {
        return Err(header_err(format!("vox_offset {vox_offset} is invalid")));
    }
    let start = vox_offset as usize;
    let slope = r.f32(112);
    let inter = r.f32(116);

    let n: usize = xyz.iter().product();
    let need = n * datatype.bytes();
    let have = bytes.len().saturating_sub(start);
    if have < need {
        return Err(DataError::PayloadSize {
            path: path.to_path_buf(),
            expected: need,
            actual: have,
        });
    }
    let payload = Reader {
        bytes: &bytes[start..start + need],
        endian,
    };
    let mut data: Vec<f32> = match datatype {
        NiftiDatatype::U8 => payload.bytes.iter().map(|&b| f32::from(b)).collect(),
        NiftiDatatype::I16 => (0..n).map(|i| f32::from(payload.i16(2 * i))).collect(),
        NiftiDatatype::F32 => (0..n).map(|i| payload.f32(4 * i)).collect(),
    };
    if slope != 0.0 && slope.is_finite() {
        let inter = if inter.is_finite() { inter } else { 0.0 };
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Ok(NiftiImage {
        dims: [xyz[2], xyz[1], xyz[0]],
        spacing_mm: [pix[2], pix[1], pix[0]],
        datatype,
        data,
    })
}

/// Values written in the on-disk datatype, before scaling.
#[derive(Clone, Copy, Debug)]
pub enum NiftiPayload<'a> {
    U8(&'a [u8]),
    I16(&'a [i16]),
    F32(&'a [f32]),
}

impl NiftiPayload<'_> {
    fn len(&self) -> usize {
        match self {
            NiftiPayload::U8(v) => v.len(),
            NiftiPayload::I16(v) => v.len(),
            NiftiPayload::F32(v) => v.len(),
        }
    }

    fn datatype(&self) -> NiftiDatatype {
        match self {
            NiftiPayload::U8(_) => NiftiDatatype::U8,
            NiftiPayload::I16(_) => NiftiDatatype::I16,
            NiftiPayload::F32(_) => NiftiDatatype::F32,
        }
    }
}

/// Encodes a little-endian single-file NIfTI-1 image. `dims` and `spacing_mm`
/// are `(D, H, W)` / `(z, y, x)`; `scl` is `(slope, inter)`.
pub fn encode_nifti(dims: [usize; 3], spacing_mm: [f64; 3], payload: NiftiPayload<'_>, scl: (f32, f32)) -> Vec<u8> {
    let n: usize = dims.iter().product();
    assert_eq!(payload.len(), n, "payload length must match dims");
    assert!(dims.iter().all(|&d| d > 0 && d <= i16::MAX as usize), "extent out of NIfTI range");
    let dt = payload.datatype();
    let mut h = vec![0u8; DEFAULT_VOX_OFFSET];
    let put = |h: &mut Vec<u8>, at: usize, b: &[u8]| h[at..at + b.len()].copy_from_slice(b);
    put(&mut h, 0, &(HEADER_SIZE as i32).to_le_bytes());
    let dim: [i16; 8] = [3, dims[2] as i16, dims[1] as i16, dims[0] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put(&mut h, 40 + 2 * i, &d.to_le_bytes());
    }
    put(&mut h, 70, &dt.code().to_le_bytes());
    put(&mut h, 72, &(8 * dt.bytes() as i16).to_le_bytes());
    let pixdim: [f32; 8] = [1.0, spacing_mm[2] as f32, spacing_mm[1] as f32, spacing_mm[0] as f32, 1.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        put(&mut h, 76 + 4 * i, &p.to_le_bytes());
    }
    put(&mut h, 108, &(DEFAULT_VOX_OFFSET as f32).to_le_bytes());
    put(&mut h, 112, &scl.0.to_le_bytes());
    put(&mut h, 116, &scl.1.to_le_bytes());
    // xyzt_units: mm
    h[123] = 2;
    put(&mut h, 344, &MAGIC);
    match payload {
        NiftiPayload::U8(v) => h.extend_from_slice(v),
        NiftiPayload::I16(v) => h.extend(v.iter().flat_map(|x| x.to_le_bytes())),
        NiftiPayload::F32(v) => h.extend(v.iter().flat_map(|x| x.to_le_bytes())),
    }
    h
}

pub fn write_nifti(
    path: &Path,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    payload: NiftiPayload<'_>,
    scl: (f32, f32),
) -> Result<(), DataError> {
    fs::write(path, encode_nifti(dims, spacing_mm, payload, scl)).map_err(|e| DataError::io(path, e))
}
