//! Voxel grids with physical geometry.
//!
//! Voxels are stored x fastest-varying: `index = x + nx * (y + ny * z)`.
//! World coordinates are in millimetres and follow
//! `world = origin + direction · (voxel ∘ spacing)`.

pub mod mvol;
pub mod nifti;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Modality {
    Ct,
    MrT1,
    MrT2fs,
    #[default]
    Synth,
}

impl Modality {
    pub fn is_ct(self) -> bool {
        matches!(self, Modality::Ct)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: Vec3,
    pub origin: Vec3,
    /// Row-major direction cosines; column `j` is the world direction of voxel axis `j`.
    pub direction: Mat3,
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: Vec3, origin: Vec3, direction: Mat3) -> Result<Self> {
        let g = Geometry {
            dims,
            spacing,
            origin,
            direction,
        };
        g.validate()?;
        Ok(g)
    }

    /// Identity direction, zero origin.
    pub fn simple(dims: [usize; 3], spacing: Vec3) -> Result<Self> {
        Self::new(dims, spacing, [0.0; 3], IDENTITY)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Geometry(format!("dims must be >= 1, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Geometry(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Geometry("origin must be finite".into()));
        }
        let det = det3(&self.direction);
        if !det.is_finite() || (det.abs() - 1.0).abs() > 1e-6 {
            return Err(Error::Geometry(format!("|det(direction)| must be 1, got {det}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    pub fn contains(&self, v: [i64; 3]) -> bool {
        (0..3).all(|a| v[a] >= 0 && (v[a] as usize) < self.dims[a])
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Max spacing over min spacing.
    pub fn anisotropy_ratio(&self) -> f64 {
        spacing_ratio(&self.spacing)
    }

    /// World position of an integer voxel index.
    pub fn world_from_voxel(&self, v: [usize; 3]) -> Result<Vec3> {
        let iv = [v[0] as i64, v[1] as i64, v[2] as i64];
        if !self.contains(iv) {
            return Err(Error::OutOfBounds {
                index: iv,
                dims: self.dims,
            });
        }
        Ok(self.world_from_continuous([v[0] as f64, v[1] as f64, v[2] as f64]))
    }

    /// Same affine map for fractional (possibly out-of-grid) voxel coordinates.
    pub fn world_from_continuous(&self, v: Vec3) -> Vec3 {
        let scaled = [
            v[0] * self.spacing[0],
            v[1] * self.spacing[1],
            v[2] * self.spacing[2],
        ];
        let d = mat_vec(&self.direction, &scaled);
        [
            self.origin[0] + d[0],
            self.origin[1] + d[1],
            self.origin[2] + d[2],
        ]
    }

    /// Continuous voxel coordinates of a world point. Never fails; the
    /// result may lie outside the grid.
    pub fn voxel_from_world(&self, p: Vec3) -> Vec3 {
        let rel = [
            p[0] - self.origin[0],
            p[1] - self.origin[1],
            p[2] - self.origin[2],
        ];
        let inv = inverse3(&self.direction);
        let r = mat_vec(&inv, &rel);
        [
            r[0] / self.spacing[0],
            r[1] / self.spacing[1],
            r[2] / self.spacing[2],
        ]
    }

    pub fn same_grid(&self, other: &Geometry) -> bool {
        self.dims == other.dims
            && close3(&self.spacing, &other.spacing)
            && close3(&self.origin, &other.origin)
            && (0..3).all(|r| close3(&self.direction[r], &other.direction[r]))
    }
}

fn close3(a: &Vec3, b: &Vec3) -> bool {
    (0..3).all(|i| (a[i] - b[i]).abs() <= 1e-9 * (1.0 + a[i].abs().max(b[i].abs())))
}

pub fn spacing_ratio(spacing: &Vec3) -> f64 {
    let max = spacing.iter().cloned().fold(f64::MIN, f64::max);
    let min = spacing.iter().cloned().fold(f64::MAX, f64::min);
    max / min
}

pub(crate) fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub(crate) fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub(crate) fn inverse3(m: &Mat3) -> Mat3 {
    let det = det3(m);
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    [
        [c(1, 1, 2, 2) / det, -c(0, 1, 2, 2) / det, c(0, 1, 1, 2) / det],
        [-c(1, 0, 2, 2) / det, c(0, 0, 2, 2) / det, -c(0, 0, 1, 2) / det],
        [c(1, 0, 2, 1) / det, -c(0, 0, 2, 1) / det, c(0, 0, 1, 1) / det],
    ]
}

/// A scalar image. Values are held as `f32` regardless of the on-disk type.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    geometry: Geometry,
    data: Vec<f32>,
    modality: Modality,
}

impl Volume3D {
    pub fn new(geometry: Geometry, data: Vec<f32>, modality: Modality) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::SizeMismatch {
                expected: geometry.len(),
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("volume contains non-finite values".into()));
        }
        Ok(Volume3D {
            geometry,
            data,
            modality,
        })
    }

    pub fn filled(geometry: Geometry, value: f32, modality: Modality) -> Result<Self> {
        let n = geometry.len();
        Self::new(geometry, vec![value; n], modality)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Binary labels on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask3D {
    geometry: Geometry,
    labels: Vec<u8>,
}

impl Mask3D {
    pub fn new(geometry: Geometry, labels: Vec<u8>) -> Result<Self> {
        geometry.validate()?;
        if labels.len() != geometry.len() {
            return Err(Error::SizeMismatch {
                expected: geometry.len(),
                found: labels.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidMask(format!("label {bad} not in {{0,1}}")));
        }
        Ok(Mask3D { geometry, labels })
    }

    pub fn empty(geometry: Geometry) -> Self {
        let n = geometry.len();
        Mask3D {
            geometry,
            labels: vec![0; n],
        }
    }

    /// Builds a mask from a predicate on voxel indices.
    pub fn from_fn(geometry: Geometry, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let [nx, ny, nz] = geometry.dims;
        let mut labels = Vec::with_capacity(geometry.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    labels.push(f(x, y, z) as u8);
                }
            }
        }
        Mask3D { geometry, labels }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.labels[self.geometry.index(x, y, z)] != 0
    }

    pub fn count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.iter().all(|&l| l == 0)
    }

    /// Voxel indices of all foreground voxels in scan order.
    pub fn foreground(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .map(|(i, _)| self.geometry.coords(i))
    }

    pub fn as_volume(&self) -> Volume3D {
        Volume3D {
            geometry: self.geometry.clone(),
            data: self.labels.iter().map(|&l| l as f32).collect(),
            modality: Modality::Synth,
        }
    }
}

/// Parses an in-memory image: NIfTI-1 when the first word is 348, otherwise
/// the single-blob MVOL form.
pub fn parse_volume_bytes(bytes: &[u8]) -> Result<Volume3D> {
    let nifti = bytes.len() >= 4 && (bytes[..4] == 348i32.to_le_bytes() || bytes[..4] == 348i32.to_be_bytes());
    if nifti {
        return nifti::parse_nifti1(bytes);
    }
    match mvol::decode_bytes(bytes)? {
        mvol::MvolData::Image(v) => Ok(v),
        mvol::MvolData::Mask(m) => Ok(m.as_volume()),
    }
}
