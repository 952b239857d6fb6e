//! MVOL: a JSON header file plus a raw little-endian payload.
//!
//! `case.mvol` holds the header; the payload lives next to it as `case.raw`
//! (x fastest-varying, no padding). Header fields:
//!
//! ```json
//! {"format":"mvol","version":1,"kind":"image","dtype":"f32",
//!  "order":"little-endian","dims":[nx,ny,nz],"spacing":[..],
//!  "origin":[..],"direction":[[..],[..],[..]],"modality":"SYNTH"}
//! ```
//!
//! Masks are always `u8`; images may be `f32`, `i16` or `u8`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::{Geometry, Mask3D, Mat3, Modality, Vec3, Volume3D};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    I16,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::I16 => 2,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Image,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvolHeader {
    pub format: String,
    pub version: u32,
    pub kind: Kind,
    pub dtype: Dtype,
    pub order: String,
    pub dims: [usize; 3],
    pub spacing: Vec3,
    pub origin: Vec3,
    pub direction: Mat3,
    #[serde(default)]
    pub modality: Modality,
}

impl MvolHeader {
    fn for_geometry(g: &Geometry, kind: Kind, dtype: Dtype, modality: Modality) -> Self {
        MvolHeader {
            format: "mvol".into(),
            version: 1,
            kind,
            dtype,
            order: "little-endian".into(),
            dims: g.dims,
            spacing: g.spacing,
            origin: g.origin,
            direction: g.direction,
            modality,
        }
    }

    fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing, self.origin, self.direction)
            .map_err(|e| Error::MalformedHeader(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MvolData {
    Image(Volume3D),
    Mask(Mask3D),
}

/// Payload path paired with a header path.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_volume(path: &Path, v: &Volume3D, dtype: Dtype) -> Result<()> {
    let payload = encode_payload(v, dtype)?;
    let header = MvolHeader::for_geometry(v.geometry(), Kind::Image, dtype, v.modality());
    write_pair(path, &header, &payload)
}

fn encode_payload(v: &Volume3D, dtype: Dtype) -> Result<Vec<u8>> {
    let data = v.data();
    let mut payload = vec![0u8; data.len() * dtype.size()];
    match dtype {
        Dtype::F32 => LittleEndian::write_f32_into(data, &mut payload),
        Dtype::I16 => {
            let ints = data
                .iter()
                .map(|&x| {
                    if x.fract() != 0.0 || x < i16::MIN as f32 || x > i16::MAX as f32 {
                        Err(Error::UnsupportedDtype(format!("value {x} not representable as i16")))
                    } else {
                        Ok(x as i16)
                    }
                })
                .collect::<Result<Vec<i16>>>()?;
            LittleEndian::write_i16_into(&ints, &mut payload);
        }
        Dtype::U8 => {
            for (o, &x) in payload.iter_mut().zip(data) {
                if x.fract() != 0.0 || !(0.0..=255.0).contains(&x) {
                    return Err(Error::UnsupportedDtype(format!("value {x} not representable as u8")));
                }
                *o = x as u8;
            }
        }
    }
    Ok(payload)
}

pub fn write_mask(path: &Path, m: &Mask3D) -> Result<()> {
    if let Some(bad) = m.labels().iter().find(|&&l| l > 1) {
        return Err(Error::InvalidMask(format!("label {bad} not in {{0,1}}")));
    }
    let header = MvolHeader::for_geometry(m.geometry(), Kind::Mask, Dtype::U8, Modality::Synth);
    write_pair(path, &header, m.labels())
}

fn write_pair(path: &Path, header: &MvolHeader, payload: &[u8]) -> Result<()> {
    let json = serde_json::to_vec_pretty(header)?;
    atomic_write(&payload_path(path), payload)?;
    atomic_write(path, &json)
}

/// Single-blob form used for uploads: compact header JSON, `\n`, payload.
pub fn encode_volume_bytes(v: &Volume3D, dtype: Dtype) -> Result<Vec<u8>> {
    let header = MvolHeader::for_geometry(v.geometry(), Kind::Image, dtype, v.modality());
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend(encode_payload(v, dtype)?);
    Ok(out)
}

pub fn decode_bytes(bytes: &[u8]) -> Result<MvolData> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader("missing newline after MVOL header".into()))?;
    let header = parse_header(&bytes[..split])?;
    decode(&header, &bytes[split + 1..])
}

pub fn read_header(path: &Path) -> Result<MvolHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(&bytes)
}

fn parse_header(bytes: &[u8]) -> Result<MvolHeader> {
    let header: MvolHeader =
        serde_json::from_slice(bytes).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if header.format != "mvol" || header.version != 1 {
        return Err(Error::MalformedHeader(format!(
            "unexpected format {:?} version {}",
            header.format, header.version
        )));
    }
    if header.order != "little-endian" {
        return Err(Error::MalformedHeader(format!("unsupported byte order {:?}", header.order)));
    }
    Ok(header)
}

pub fn read_mvol(path: &Path) -> Result<MvolData> {
    let header = read_header(path)?;
    let pp = payload_path(path);
    let payload = fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
    decode(&header, &payload)
}

/// Decodes an in-memory header + payload pair.
pub fn decode(header: &MvolHeader, payload: &[u8]) -> Result<MvolData> {
    let geometry = header.geometry()?;
    let expected = geometry.len() * header.dtype.size();
    if payload.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    match header.kind {
        Kind::Mask => {
            if header.dtype != Dtype::U8 {
                return Err(Error::UnsupportedDtype(format!("mask dtype {:?}", header.dtype)));
            }
            Ok(MvolData::Mask(Mask3D::new(geometry, payload.to_vec())?))
        }
        Kind::Image => {
            let n = geometry.len();
            let data = match header.dtype {
                Dtype::F32 => {
                    let mut d = vec![0f32; n];
                    LittleEndian::read_f32_into(payload, &mut d);
                    d
                }
                Dtype::I16 => {
                    let mut d = vec![0i16; n];
                    LittleEndian::read_i16_into(payload, &mut d);
                    d.into_iter().map(f32::from).collect()
                }
                Dtype::U8 => payload.iter().map(|&b| f32::from(b)).collect(),
            };
            Ok(MvolData::Image(Volume3D::new(geometry, data, header.modality)?))
        }
    }
}

pub fn read_volume(path: &Path) -> Result<Volume3D> {
    match read_mvol(path)? {
        MvolData::Image(v) => Ok(v),
        MvolData::Mask(m) => Ok(m.as_volume()),
    }
}

pub fn read_mask(path: &Path) -> Result<Mask3D> {
    match read_mvol(path)? {
        MvolData::Mask(m) => Ok(m),
        MvolData::Image(v) => {
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
    }
}
