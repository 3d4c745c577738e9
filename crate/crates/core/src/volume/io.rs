//! NIfTI-1 single-file (`.nii`, `.nii.gz`) and raw float32 + JSON sidecar I/O.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use super::{GridMeta, Mask, Unit, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const NIFTI_ECODE_COMMENT: i32 = 6;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

const UNIT_NORMALIZED_TAG: &str = "unit=normalized";

/// Exact f64 geometry carried in a comment extension, since the header
/// fields themselves are f32.
#[derive(Debug, Serialize, Deserialize)]
struct GeometryExtension {
    ablate_grid: ExactGeometry,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExactGeometry {
    spacing: [f64; 3],
    origin: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    NiftiGz,
    Raw,
}

impl VolumeFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_ascii_lowercase();
        if name.ends_with(".nii.gz") {
            Ok(VolumeFormat::NiftiGz)
        } else if name.ends_with(".nii") {
            Ok(VolumeFormat::Nifti)
        } else if name.ends_with(".raw") || name.ends_with(".json") {
            Ok(VolumeFormat::Raw)
        } else {
            Err(Error::format(
                path,
                "unknown extension (expected .nii, .nii.gz, .raw or .json)",
            ))
        }
    }
}

/// Sidecar metadata of the raw format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct RawSidecar {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub unit: Unit,
}

/// `foo.raw` / `foo.json` -> (`foo.raw`, `foo.json`).
pub(crate) fn raw_pair(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("raw"), path.with_extension("json"))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn f32s_from_le(bytes: &[u8], expected: usize) -> Result<Vec<f32>> {
    if bytes.len() != expected * 4 {
        return Err(Error::PayloadSizeMismatch {
            expected: expected * 4,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn f32s_to_le(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Load a volume from NIfTI-1 or raw+sidecar.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Raw => load_raw(path),
        VolumeFormat::Nifti => parse_nifti(path, &read_file(path)?),
        VolumeFormat::NiftiGz => {
            let compressed = read_file(path)?;
            let mut bytes = Vec::new();
            GzDecoder::new(&compressed[..])
                .read_to_end(&mut bytes)
                .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
            parse_nifti(path, &bytes)
        }
    }
}

/// Save a volume; NIfTI output is float32.
pub fn save_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Raw => save_raw(vol.grid(), vol.data(), vol.unit(), path),
        fmt => {
            let mut bytes = nifti_header(vol.grid(), DT_FLOAT32, 32, vol.unit());
            bytes.extend_from_slice(&f32s_to_le(vol.data()));
            write_nifti(path, &bytes, fmt == VolumeFormat::NiftiGz)
        }
    }
}

/// Load any supported file and binarize it (nonzero -> 1).
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    Ok(Mask::from_volume(&load_volume(path)?))
}

/// Save a mask; NIfTI output is uint8, raw output is float32 0/1.
pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Raw => {
            let vals: Vec<f32> = mask.data().iter().map(|&v| v as f32).collect();
            save_raw(mask.grid(), &vals, Unit::Normalized, path)
        }
        fmt => {
            let mut bytes = nifti_header(mask.grid(), DT_UINT8, 8, Unit::Normalized);
            bytes.extend_from_slice(mask.data());
            write_nifti(path, &bytes, fmt == VolumeFormat::NiftiGz)
        }
    }
}

fn write_nifti(path: &Path, bytes: &[u8], gz: bool) -> Result<()> {
    if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        let out = enc.finish().map_err(|e| Error::io(path, e))?;
        write_file(path, &out)
    } else {
        write_file(path, bytes)
    }
}

fn load_raw(path: &Path) -> Result<Volume> {
    let (raw, json) = raw_pair(path);
    let side: RawSidecar = serde_json::from_slice(&read_file(&json)?)
        .map_err(|e| Error::format(&json, e.to_string()))?;
    let grid = GridMeta::new(side.dims, side.spacing, side.origin)?;
    let data = f32s_from_le(&read_file(&raw)?, grid.len())?;
    Volume::new(grid, data, side.unit)
}

fn save_raw(grid: &GridMeta, data: &[f32], unit: Unit, path: &Path) -> Result<()> {
    let (raw, json) = raw_pair(path);
    let side = RawSidecar {
        dims: grid.dims,
        spacing: grid.spacing,
        origin: grid.origin,
        unit,
    };
    write_file(&json, serde_json::to_string_pretty(&side)?.as_bytes())?;
    write_file(&raw, &f32s_to_le(data))
}

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}

fn get_i32(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn get_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn geometry_extension(grid: &GridMeta) -> Vec<u8> {
    let json = serde_json::to_vec(&GeometryExtension {
        ablate_grid: ExactGeometry {
            spacing: grid.spacing,
            origin: grid.origin,
        },
    })
    .expect("geometry serializes");
    let esize = (8 + json.len()).div_ceil(16) * 16;
    let mut ext = vec![0u8; esize];
    put_i32(&mut ext, 0, esize as i32);
    put_i32(&mut ext, 4, NIFTI_ECODE_COMMENT);
    ext[8..8 + json.len()].copy_from_slice(&json);
    ext
}

fn nifti_header(grid: &GridMeta, datatype: i16, bitpix: i16, unit: Unit) -> Vec<u8> {
    let ext = geometry_extension(grid);
    let vox_offset = HEADER_SIZE + 4 + ext.len();
    let mut h = vec![0u8; HEADER_SIZE + 4];
    put_i32(&mut h, 0, HEADER_SIZE as i32);
    h[38] = b'r';
    put_i16(&mut h, 40, 3);
    for a in 0..3 {
        put_i16(&mut h, 42 + 2 * a, grid.dims[a] as i16);
    }
    for a in 3..7 {
        put_i16(&mut h, 42 + 2 * a, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, grid.spacing[a] as f32);
    }
    put_f32(&mut h, 108, vox_offset as f32);
    put_f32(&mut h, 112, 1.0);
    // xyzt_units: mm
    h[123] = 2;
    if unit == Unit::Normalized {
        h[148..148 + UNIT_NORMALIZED_TAG.len()].copy_from_slice(UNIT_NORMALIZED_TAG.as_bytes());
    }
    // qform: identity rotation, offset = origin
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    for a in 0..3 {
        put_f32(&mut h, 268 + 4 * a, grid.origin[a] as f32);
    }
    for a in 0..3 {
        let row = 280 + 16 * a;
        put_f32(&mut h, row + 4 * a, grid.spacing[a] as f32);
        put_f32(&mut h, row + 12, grid.origin[a] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h[348] = 1;
    h.extend_from_slice(&ext);
    h
}

/// Scan header extensions for exact geometry that agrees with the f32 header.
fn exact_geometry(bytes: &[u8], vox_offset: usize, spacing: [f64; 3], origin: [f64; 3]) -> Option<([f64; 3], [f64; 3])> {
    if bytes.len() < HEADER_SIZE + 4 || bytes[HEADER_SIZE] == 0 {
        return None;
    }
    let mut off = HEADER_SIZE + 4;
    while off + 8 <= vox_offset.min(bytes.len()) {
        let esize = get_i32(bytes, off);
        if esize < 16 || off + esize as usize > vox_offset {
            return None;
        }
        let esize = esize as usize;
        if get_i32(bytes, off + 4) == NIFTI_ECODE_COMMENT {
            let body = &bytes[off + 8..off + esize];
            let end = body.iter().position(|&b| b == 0).unwrap_or(body.len());
            if let Ok(ext) = serde_json::from_slice::<GeometryExtension>(&body[..end]) {
                let g = ext.ablate_grid;
                let close = |a: f64, b: f64| (a - b).abs() <= 1e-5 * (1.0 + b.abs());
                if (0..3).all(|i| close(g.spacing[i], spacing[i]) && close(g.origin[i], origin[i])) {
                    return Some((g.spacing, g.origin));
                }
            }
        }
        off += esize;
    }
    None
}

fn parse_nifti(path: &Path, bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(path, "file shorter than a NIfTI-1 header"));
    }
    if get_i32(bytes, 0) != HEADER_SIZE as i32 {
        return Err(Error::format(
            path,
            "sizeof_hdr != 348 (big-endian or not NIfTI-1)",
        ));
    }
    if &bytes[344..347] != b"n+1" {
        return Err(Error::format(path, "not a single-file NIfTI-1 (magic n+1)"));
    }
    let ndim = get_i16(bytes, 40);
    let mut dims = [1usize; 3];
    for a in 0..3 {
        let d = get_i16(bytes, 42 + 2 * a);
        if (a as i16) < ndim && d < 1 {
            return Err(Error::format(path, format!("invalid dim[{}] = {d}", a + 1)));
        }
        if (a as i16) < ndim {
            dims[a] = d as usize;
        }
    }
    if !(1..=7).contains(&ndim) || (4..=ndim as usize).any(|a| get_i16(bytes, 40 + 2 * a) > 1) {
        return Err(Error::format(path, "only 3D volumes are supported"));
    }
    let datatype = get_i16(bytes, 70);
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let pix: [f64; 3] = std::array::from_fn(|a| get_f32(bytes, 80 + 4 * a).abs() as f64);

    let vox_offset = get_f32(bytes, 108).max(HEADER_SIZE as f32) as usize;
    let (spacing, origin) = orientation(bytes, pix)?;
    let (spacing, origin) =
        exact_geometry(bytes, vox_offset, spacing, origin).unwrap_or((spacing, origin));
    let grid = GridMeta::new(dims, spacing, origin)?;

    let expected = vox_offset + grid.len() * width;
    if bytes.len() != expected {
        return Err(Error::PayloadSizeMismatch {
            expected,
            found: bytes.len(),
        });
    }
    let payload = &bytes[vox_offset..];
    let raw: Vec<f64> = match datatype {
        DT_UINT8 => payload.iter().map(|&b| b as f64).collect(),
        DT_INT8 => payload.iter().map(|&b| b as i8 as f64).collect(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        DT_UINT16 => payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        DT_INT32 => payload
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        DT_FLOAT32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        _ => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let slope = get_f32(bytes, 112) as f64;
    let inter = get_f32(bytes, 116) as f64;
    let scaled = slope != 0.0 && !(slope == 1.0 && inter == 0.0);
    let data: Vec<f32> = raw
        .into_iter()
        .map(|v| if scaled { (v * slope + inter) as f32 } else { v as f32 })
        .collect();

    let descrip = &bytes[148..228];
    let unit = if descrip.starts_with(UNIT_NORMALIZED_TAG.as_bytes()) {
        Unit::Normalized
    } else {
        Unit::Hu
    };
    Volume::new(grid, data, unit)
}

/// Spacing and origin from sform (preferred) or qform. Anything other than a
/// positive diagonal scaling plus offset is rejected.
fn orientation(h: &[u8], pix: [f64; 3]) -> Result<([f64; 3], [f64; 3])> {
    let sform_code = get_i16(h, 254);
    let qform_code = get_i16(h, 252);
    if sform_code > 0 {
        let mut spacing = [0.0; 3];
        let mut origin = [0.0; 3];
        for r in 0..3 {
            let row = 280 + 16 * r;
            for c in 0..3 {
                let v = get_f32(h, row + 4 * c) as f64;
                if c == r {
                    if !(v > 0.0) {
                        return Err(Error::UnsupportedOrientation);
                    }
                    spacing[r] = v;
                } else if v.abs() > 1e-6 {
                    return Err(Error::UnsupportedOrientation);
                }
            }
            origin[r] = get_f32(h, row + 12) as f64;
        }
        Ok((spacing, origin))
    } else if qform_code > 0 {
        let quat: [f32; 3] = std::array::from_fn(|a| get_f32(h, 256 + 4 * a));
        let qfac = get_f32(h, 76);
        if quat.iter().any(|q| q.abs() > 1e-6) || qfac < 0.0 {
            return Err(Error::UnsupportedOrientation);
        }
        let origin = std::array::from_fn(|a| get_f32(h, 268 + 4 * a) as f64);
        Ok((pix, origin))
    } else {
        Ok((pix, [0.0; 3]))
    }
}
