//! Minimal NIfTI-1 reader/writer for 3D volumes.
//!
//! Supports `.nii` and `.nii.gz`, little-endian, single-file (`n+1`) layout.
//! Voxel spacing is taken from `pixdim`; orientation matrices are ignored and
//! data is handled in stored index order. The fastest-varying on-disk axis
//! (NIfTI `i`) maps to array axis 2 (`x`), and the slowest (`k`) to array
//! axis 0 (`z`, the through-plane axis).
//!
//! Intensities are min-max normalized to `[0, 1]` at load when the stored
//! range falls outside that interval; data already within `[0, 1]` is loaded
//! verbatim so that save/load round-trips are exact. A constant volume whose
//! value lies outside `[0, 1]` normalizes to all zeros.

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

struct Header {
    dim: [i16; 8],
    datatype: i16,
    pixdim: [f32; 8],
    scl_slope: f32,
    scl_inter: f32,
    intent_p1: f32,
}

fn read_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn read_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    if bytes.len() < VOX_OFFSET {
        return Err(Error::format(path, "file shorter than NIfTI-1 header"));
    }
    let sizeof_hdr = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::format(
            path,
            "not a little-endian NIfTI-1 file (sizeof_hdr != 348)",
        ));
    }
    let magic = &bytes[344..348];
    if &magic[..3] != b"n+1" {
        return Err(Error::format(path, "unsupported magic (expected n+1)"));
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = read_i16(bytes, 40 + 2 * i);
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = read_f32(bytes, 76 + 4 * i);
    }
    Ok(Header {
        dim,
        datatype: read_i16(bytes, 70),
        pixdim,
        scl_slope: read_f32(bytes, 112),
        scl_inter: read_f32(bytes, 116),
        intent_p1: read_f32(bytes, 56),
    })
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    // Gzip magic rather than extension, so renamed files still load.
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        MultiGzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Decodes the payload into f64 values in stored order (x fastest).
fn decode_payload(path: &Path, header: &Header, bytes: &[u8]) -> Result<Vec<f64>> {
    let n = header.dim[1] as usize * header.dim[2] as usize * header.dim[3] as usize;
    let elem = match header.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(Error::format(path, format!("unsupported datatype {other}")));
        }
    };
    let need = VOX_OFFSET + n * elem;
    if bytes.len() < need {
        return Err(Error::format(
            path,
            format!("truncated payload: have {} bytes, need {need}", bytes.len()),
        ));
    }
    let body = &bytes[VOX_OFFSET..need];
    let mut vals = Vec::with_capacity(n);
    match header.datatype {
        DT_UINT8 => vals.extend(body.iter().map(|&b| b as f64)),
        DT_INT16 => vals.extend(
            body.chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64),
        ),
        DT_INT32 => vals.extend(
            body.chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64),
        ),
        DT_FLOAT32 => vals.extend(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64),
        ),
        DT_FLOAT64 => vals.extend(body.chunks_exact(8).map(|c| {
            f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
        })),
        _ => unreachable!(),
    }
    let slope = header.scl_slope;
    let inter = header.scl_inter;
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        for v in &mut vals {
            *v = *v * slope as f64 + inter as f64;
        }
    }
    Ok(vals)
}

fn check_3d(path: &Path, header: &Header) -> Result<(usize, usize, usize)> {
    if header.dim[0] != 3 {
        return Err(Error::format(
            path,
            format!("expected a 3D payload, got dim[0] = {}", header.dim[0]),
        ));
    }
    let (nx, ny, nz) = (
        header.dim[1] as usize,
        header.dim[2] as usize,
        header.dim[3] as usize,
    );
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::format(path, "zero-sized dimension"));
    }
    Ok((nx, ny, nz))
}

fn spacing_from(header: &Header) -> (f32, f32, f32) {
    let sane = |p: f32| if p > 0.0 && p.is_finite() { p } else { 1.0 };
    (
        sane(header.pixdim[3]),
        sane(header.pixdim[2]),
        sane(header.pixdim[1]),
    )
}

/// Loads a 3D image volume, normalizing intensities as described at module
/// level. Fails on missing files, non-3D payloads, and non-finite voxels
/// (reporting the `(z, y, x)` index of the first offender).
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let header = parse_header(path, &bytes)?;
    let (nx, ny, nz) = check_3d(path, &header)?;
    let vals = decode_payload(path, &header, &bytes)?;

    for (i, v) in vals.iter().enumerate() {
        if !v.is_finite() {
            let z = i / (nx * ny);
            let y = (i / nx) % ny;
            let x = i % nx;
            return Err(Error::NonFiniteVoxel(z, y, x));
        }
    }
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let data: Vec<f32> = if min >= 0.0 && max <= 1.0 {
        vals.iter().map(|&v| v as f32).collect()
    } else if max > min {
        vals.iter().map(|&v| ((v - min) / (max - min)) as f32).collect()
    } else {
        vec![0.0; vals.len()]
    };
    // x varies fastest on disk, matching row-major (z, y, x).
    let arr = Array3::from_shape_vec((nz, ny, nx), data)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Volume::new(arr, spacing_from(&header))
}

/// Loads a 3D label volume. `num_classes` is recovered from the `intent_p1`
/// slot written by [`save_labels`], falling back to `max + 1`.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let header = parse_header(path, &bytes)?;
    let (nx, ny, nz) = check_3d(path, &header)?;
    let vals = decode_payload(path, &header, &bytes)?;

    let mut data = Vec::with_capacity(vals.len());
    for (i, &v) in vals.iter().enumerate() {
        if !v.is_finite() {
            let z = i / (nx * ny);
            let y = (i / nx) % ny;
            let x = i % nx;
            return Err(Error::NonFiniteVoxel(z, y, x));
        }
        if v < 0.0 || v > u8::MAX as f64 || v.fract() != 0.0 {
            return Err(Error::format(
                path,
                format!("label value {v} is not a small non-negative integer"),
            ));
        }
        data.push(v as u8);
    }
    let max = data.iter().copied().max().unwrap_or(0) as usize;
    let num_classes = if header.intent_p1 >= 1.0 && header.intent_p1.fract() == 0.0 {
        (header.intent_p1 as usize).max(max + 1)
    } else {
        max + 1
    };
    let arr = Array3::from_shape_vec((nz, ny, nx), data)
        .map_err(|e| Error::format(path, e.to_string()))?;
    LabelVolume::new(arr, spacing_from(&header), num_classes)
}

fn build_header(
    shape: (usize, usize, usize),
    spacing: (f32, f32, f32),
    datatype: i16,
    bitpix: i16,
    intent_p1: f32,
) -> [u8; VOX_OFFSET] {
    let mut h = [0u8; VOX_OFFSET];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    // dim_info and friends stay zero.
    let (nz, ny, nx) = shape;
    let dim: [i16; 8] = [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[56..60].copy_from_slice(&intent_p1.to_le_bytes());
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    let pixdim: [f32; 8] = [1.0, spacing.2, spacing.1, spacing.0, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    h[123] = 2; // xyzt_units: millimeters
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn write_file(path: &Path, header: &[u8], body: &[u8]) -> Result<()> {
    let gz = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    if gz {
        let mut enc = GzEncoder::new(file, Compression::fast());
        enc.write_all(header).map_err(|e| Error::io(path, e))?;
        enc.write_all(body).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        let mut file = file;
        file.write_all(header).map_err(|e| Error::io(path, e))?;
        file.write_all(body).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Saves a volume as float32 NIfTI-1 (`.nii` or `.nii.gz` by extension).
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = build_header(v.shape(), v.spacing, DT_FLOAT32, 32, 0.0);
    let slice = v
        .data
        .as_slice()
        .expect("volume data is standard layout");
    let mut body = Vec::with_capacity(slice.len() * 4);
    for val in slice {
        body.extend_from_slice(&val.to_le_bytes());
    }
    write_file(path, &header, &body)
}

/// Saves labels as uint8 NIfTI-1, recording `num_classes` in `intent_p1`.
pub fn save_labels(l: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = build_header(l.shape(), l.spacing, DT_UINT8, 8, l.num_classes as f32);
    let body = l.data.as_slice().expect("label data is standard layout");
    write_file(path, &header, body)
}
