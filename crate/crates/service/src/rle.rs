//! Mask wire format: foreground runs over x-fastest scan order.
//!
//! `{"dims":[nx,ny,nz],"runs":[[start,length],...]}` where `start` is the
//! flat index `x + nx·(y + ny·z)` of the first foreground voxel of a run and
//! `length` ≥ 1. Runs are sorted, non-overlapping and never adjacent.

use extremeseg::{Geometry, Mask3D};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub dims: [usize; 3],
    pub runs: Vec<[usize; 2]>,
}

impl RleMask {
    pub fn encode(mask: &Mask3D) -> Self {
        let mut runs: Vec<[usize; 2]> = Vec::new();
        for (i, &l) in mask.labels().iter().enumerate() {
            if l == 0 {
                continue;
            }
            match runs.last_mut() {
                Some(r) if r[0] + r[1] == i => r[1] += 1,
                _ => runs.push([i, 1]),
            }
        }
        RleMask { dims: mask.dims(), runs }
    }

    pub fn count(&self) -> usize {
        self.runs.iter().map(|r| r[1]).sum()
    }

    /// Expands onto `geometry`, which must have the encoded dims.
    pub fn decode(&self, geometry: &Geometry) -> Result<Mask3D, String> {
        if geometry.dims != self.dims {
            return Err(format!("dims {:?} do not match geometry {:?}", self.dims, geometry.dims));
        }
        let n = geometry.len();
        let mut labels = vec![0u8; n];
        let mut end = 0;
        for &[start, len] in &self.runs {
            if len == 0 || start < end || start + len > n {
                return Err(format!("bad run [{start}, {len}]"));
            }
            labels[start..start + len].fill(1);
            end = start + len;
        }
        Mask3D::new(geometry.clone(), labels).map_err(|e| e.to_string())
    }
}
