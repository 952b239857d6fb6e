//! Read-only NIfTI-1 support: single-file (`n+1`), uncompressed, sform-based.
//!
//! Anything the reader cannot map to a valid [`Geometry`] without guessing
//! is rejected: qform-only files, detached headers, gzip streams, 4D data.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use super::{Geometry, Mask3D, Modality, Volume3D};
use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_INT32: i16 = 8;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

pub fn read_nifti1(path: &Path) -> Result<Volume3D> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti1(&bytes)
}

pub fn read_nifti1_mask(path: &Path) -> Result<Mask3D> {
    let v = read_nifti1(path)?;
    let labels = v
        .data()
        .iter()
        .map(|&x| match x {
            0.0 => Ok(0),
            1.0 => Ok(1),
            other => Err(Error::InvalidMask(format!("value {other} is not a label"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Mask3D::new(v.geometry().clone(), labels)
}

pub fn parse_nifti1(bytes: &[u8]) -> Result<Volume3D> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        return Err(Error::Nifti("gzip-compressed input is not supported".into()));
    }
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Nifti(format!("file too short for header: {} bytes", bytes.len())));
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse_with::<LittleEndian>(bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse_with::<BigEndian>(bytes)
    } else {
        Err(Error::Nifti("sizeof_hdr is not 348".into()))
    }
}

fn parse_with<E: ByteOrder>(b: &[u8]) -> Result<Volume3D> {
    let magic = &b[344..348];
    if magic != b"n+1\0" {
        return Err(Error::Nifti(format!(
            "bad magic {:?}; only single-file n+1 is supported",
            String::from_utf8_lossy(&magic[..3])
        )));
    }

    let dim: Vec<i16> = (0..8).map(|i| E::read_i16(&b[40 + 2 * i..])).collect();
    let ndim = dim[0];
    if !(3..=7).contains(&ndim) {
        return Err(Error::Nifti(format!("dim[0] = {ndim}, expected a 3D image")));
    }
    if dim[4..=ndim as usize].iter().any(|&d| d != 1) {
        return Err(Error::Nifti("4D and multi-channel images are not supported".into()));
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(Error::Nifti(format!("non-positive dims {:?}", &dim[1..4])));
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];

    let datatype = E::read_i16(&b[70..]);
    let vox_offset = E::read_f32(&b[108..]);
    let scl_slope = E::read_f32(&b[112..]);
    let scl_inter = E::read_f32(&b[116..]);
    let qform_code = E::read_i16(&b[252..]);
    let sform_code = E::read_i16(&b[254..]);

    if sform_code <= 0 {
        return Err(Error::Nifti(if qform_code > 0 {
            "qform-only orientation is not supported; sform_code must be > 0".into()
        } else {
            "no sform present".into()
        }));
    }

    let mut srow = [[0f64; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = E::read_f32(&b[280 + 16 * r + 4 * c..]) as f64;
        }
    }
    let mut spacing = [0f64; 3];
    let mut direction = [[0f64; 3]; 3];
    for c in 0..3 {
        let norm = (0..3).map(|r| srow[r][c] * srow[r][c]).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::Nifti(format!("sform column {c} is degenerate")));
        }
        spacing[c] = norm;
        for r in 0..3 {
            direction[r][c] = srow[r][c] / norm;
        }
    }
    let origin = [srow[0][3], srow[1][3], srow[2][3]];
    let geometry = Geometry::new(dims, spacing, origin, direction)
        .map_err(|e| Error::Nifti(format!("sform does not describe a rigid grid: {e}")))?;

    let (elem, read): (usize, fn(&[u8]) -> f64) = match datatype {
        DT_UINT8 => (1, |s| s[0] as f64),
        DT_INT16 => (2, |s| E::read_i16(s) as f64),
        DT_INT32 => (4, |s| E::read_i32(s) as f64),
        DT_FLOAT32 => (4, |s| E::read_f32(s) as f64),
        DT_FLOAT64 => (8, |s| E::read_f64(s)),
        other => return Err(Error::UnsupportedDtype(format!("nifti datatype {other}"))),
    };

    let offset = vox_offset as usize;
    if vox_offset < HEADER_SIZE as f32 || vox_offset.fract() != 0.0 {
        return Err(Error::Nifti(format!("invalid vox_offset {vox_offset}")));
    }
    let n = geometry.len();
    let expected = n * elem;
    let found = b.len().saturating_sub(offset);
    if found < expected {
        return Err(Error::SizeMismatch { expected, found });
    }
    let (slope, inter) = if scl_slope == 0.0 || !scl_slope.is_finite() {
        (1.0, 0.0)
    } else {
        (scl_slope as f64, scl_inter as f64)
    };
    let data = b[offset..offset + expected]
        .chunks_exact(elem)
        .map(|s| (read(s) * slope + inter) as f32)
        .collect();
    Volume3D::new(geometry, data, Modality::Synth)
}
