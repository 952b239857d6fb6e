//! Orthogonal slice rendering.
//!
//! Pixel `(r, c)` of a slice at index `k` shows voxel
//!
//! | plane    | fixed axis | voxel       | width × height |
//! |----------|------------|-------------|----------------|
//! | axial    | z = k      | (c, r, k)   | nx × ny        |
//! | coronal  | y = k      | (c, k, r)   | nx × nz        |
//! | sagittal | x = k      | (k, c, r)   | ny × nz        |
//!
//! Grey value = clamp(255 · (v − (center − width/2)) / width, 0, 255), rounded.

use extremeseg::Volume3D;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub fn parse(s: &str) -> Option<Plane> {
        match s {
            "axial" => Some(Plane::Axial),
            "coronal" => Some(Plane::Coronal),
            "sagittal" => Some(Plane::Sagittal),
            _ => None,
        }
    }

    pub fn fixed_axis(self) -> usize {
        match self {
            Plane::Axial => 2,
            Plane::Coronal => 1,
            Plane::Sagittal => 0,
        }
    }

    /// `(width, height)` in pixels.
    pub fn size(self, dims: [usize; 3]) -> (usize, usize) {
        match self {
            Plane::Axial => (dims[0], dims[1]),
            Plane::Coronal => (dims[0], dims[2]),
            Plane::Sagittal => (dims[1], dims[2]),
        }
    }

    pub fn voxel(self, r: usize, c: usize, k: usize) -> [usize; 3] {
        match self {
            Plane::Axial => [c, r, k],
            Plane::Coronal => [c, k, r],
            Plane::Sagittal => [k, c, r],
        }
    }
}

/// Default window covering the full intensity range.
pub fn default_window(v: &Volume3D) -> (f64, f64) {
    let (lo, hi) = v.min_max();
    let width = (hi - lo) as f64;
    ((lo as f64 + hi as f64) / 2.0, if width > 0.0 { width } else { 1.0 })
}

pub fn window(v: f32, center: f64, width: f64) -> u8 {
    let g = 255.0 * (v as f64 - (center - width / 2.0)) / width;
    g.clamp(0.0, 255.0).round() as u8
}

/// Grey pixels of one slice, row-major; `None` if `k` is out of range.
pub fn render(v: &Volume3D, plane: Plane, k: usize, center: f64, width: f64) -> Option<(usize, usize, Vec<u8>)> {
    let dims = v.dims();
    if k >= dims[plane.fixed_axis()] {
        return None;
    }
    let (w, h) = plane.size(dims);
    let mut px = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let [x, y, z] = plane.voxel(r, c, k);
            px.push(window(v.get(x, y, z), center, width));
        }
    }
    Some((w, h, px))
}

pub fn encode_png(w: usize, h: usize, px: &[u8]) -> Result<Vec<u8>, png::EncodingError> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(px)?;
    }
    Ok(buf)
}
