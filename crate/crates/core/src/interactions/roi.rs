use serde::{Deserialize, Serialize};

use super::InteractionSet;
use crate::error::{Error, Result};

/// Fraction of the click bounding-box size added to each side.
pub const RELAXATION: f64 = 0.1;

/// Region of interest on a grid: the in-image inclusive range `[lo, hi]`
/// plus zero-padding beyond the image on either side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    pub pad_lo: [usize; 3],
    pub pad_hi: [usize; 3],
}

impl RoiBox {
    /// Output size including padding.
    pub fn size(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.hi[a] - self.lo[a] + 1 + self.pad_lo[a] + self.pad_hi[a])
    }

    /// Image coordinate of ROI voxel 0 (negative when padded).
    pub fn offset(&self) -> [i64; 3] {
        std::array::from_fn(|a| self.lo[a] as i64 - self.pad_lo[a] as i64)
    }

    pub fn full(dims: [usize; 3]) -> Self {
        RoiBox {
            lo: [0; 3],
            hi: std::array::from_fn(|a| dims[a] - 1),
            pad_lo: [0; 3],
            pad_hi: [0; 3],
        }
    }

    /// Grows to per-axis divisibility, using image voxels first and
    /// zero-padding only where the image is exhausted.
    pub fn grow_to_divisors(mut self, divisors: [usize; 3], dims: [usize; 3]) -> Self {
        for a in 0..3 {
            let d = divisors[a].max(1);
            let total = self.size()[a];
            let need = total.div_ceil(d) * d - total;
            if need == 0 {
                continue;
            }
            let want_lo = need / 2;
            let want_hi = need - want_lo;
            let room_lo = if self.pad_lo[a] == 0 { self.lo[a] } else { 0 };
            let room_hi = if self.pad_hi[a] == 0 { dims[a] - 1 - self.hi[a] } else { 0 };
            let take_lo = want_lo.min(room_lo);
            let take_hi = want_hi.min(room_hi);
            let mut rem_lo = want_lo - take_lo;
            let mut rem_hi = want_hi - take_hi;
            // spill the shortfall of one side into spare room on the other
            let spare_hi = (room_hi - take_hi).min(rem_lo);
            rem_lo -= spare_hi;
            let spare_lo = (room_lo - take_lo).min(rem_hi);
            rem_hi -= spare_lo;
            self.lo[a] -= take_lo + spare_lo;
            self.hi[a] += take_hi + spare_hi;
            self.pad_lo[a] += rem_lo;
            self.pad_hi[a] += rem_hi;
        }
        self
    }

    pub fn contains_image_voxel(&self, v: [i64; 3]) -> bool {
        let off = self.offset();
        let size = self.size();
        (0..3).all(|a| v[a] >= off[a] && v[a] < off[a] + size[a] as i64)
    }
}

/// ROI from six voxel-space clicks on a grid of `image_dims`.
pub fn roi_from_points(points: &InteractionSet, divisors: [usize; 3], image_dims: [usize; 3]) -> Result<RoiBox> {
    roi_from_points_with(points, divisors, image_dims, RELAXATION)
}

pub fn roi_from_points_with(
    points: &InteractionSet,
    divisors: [usize; 3],
    image_dims: [usize; 3],
    relaxation: f64,
) -> Result<RoiBox> {
    if !(relaxation >= 0.0) {
        return Err(Error::InvalidArgument(format!("relaxation must be >= 0, got {relaxation}")));
    }
    let idx = points.voxel_indices()?;
    let mut roi = RoiBox {
        lo: [0; 3],
        hi: [0; 3],
        pad_lo: [0; 3],
        pad_hi: [0; 3],
    };
    for a in 0..3 {
        let lo = idx.iter().map(|p| p[a]).min().expect("six points");
        let hi = idx.iter().map(|p| p[a]).max().expect("six points");
        let size = (hi - lo + 1) as f64;
        let grow = (relaxation * size).ceil() as i64;
        let (lo, hi) = (lo - grow, hi + grow);
        let n = image_dims[a] as i64;
        if hi < 0 || lo >= n {
            return Err(Error::Interactions(format!(
                "clicks on axis {a} lie outside the image (extent {lo}..={hi}, dims {n})"
            )));
        }
        roi.lo[a] = lo.max(0) as usize;
        roi.hi[a] = hi.min(n - 1) as usize;
        roi.pad_lo[a] = (-lo).max(0) as usize;
        roi.pad_hi[a] = (hi - (n - 1)).max(0) as usize;
    }
    Ok(roi.grow_to_divisors(divisors, image_dims))
}
