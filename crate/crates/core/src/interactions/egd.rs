//! Exponentialized geodesic distance.
//!
//! `D(v)` is the cheapest 6-connected path cost from any seed to `v`, with
//! edge cost `(1 − λ)·‖i − j‖_mm + λ·|I(i) − I(j)|`; the map is
//! `EGD(v) = exp(−ν·D(v))`. Distances are exact (Dijkstra on the grid graph).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgdParams {
    /// Weight of the intensity term against the spatial term.
    pub lambda: f64,
    /// Exponent scale.
    pub nu: f64,
    pub connectivity: u8,
}

impl Default for EgdParams {
    fn default() -> Self {
        EgdParams {
            lambda: 1.0,
            nu: 1.0,
            connectivity: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgdMap {
    pub dims: [usize; 3],
    pub params: EgdParams,
    distance: Vec<f64>,
}

impl EgdMap {
    pub fn distance(&self) -> &[f64] {
        &self.distance
    }

    pub fn values(&self) -> Vec<f64> {
        self.distance.iter().map(|d| (-self.params.nu * d).exp()).collect()
    }

    /// Network-ready values, clamped away from zero so the map stays in (0, 1].
    pub fn values_f32(&self) -> Vec<f32> {
        self.distance
            .iter()
            .map(|d| ((-self.params.nu * d).exp() as f32).max(f32::MIN_POSITIVE))
            .collect()
    }
}

#[derive(Copy, Clone, PartialEq)]
struct Entry {
    cost: f64,
    index: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Geodesic distances from the nearest seed on a grid of `dims`.
pub fn geodesic_distance(
    intensity: &[f32],
    dims: [usize; 3],
    spacing: Vec3,
    seeds: &[[usize; 3]],
    lambda: f64,
) -> Result<Vec<f64>> {
    let [nx, ny, nz] = dims;
    if intensity.len() != nx * ny * nz {
        return Err(Error::Shape(format!(
            "intensity length {} does not match dims {dims:?}",
            intensity.len()
        )));
    }
    if seeds.is_empty() {
        return Err(Error::Interactions("no seeds".into()));
    }
    let mut dist = vec![f64::INFINITY; intensity.len()];
    let mut heap = BinaryHeap::new();
    for s in seeds {
        if (0..3).any(|a| s[a] >= dims[a]) {
            return Err(Error::Interactions(format!("seed {s:?} outside ROI {dims:?}")));
        }
        let i = s[0] + nx * (s[1] + ny * s[2]);
        dist[i] = 0.0;
        heap.push(Entry { cost: 0.0, index: i });
    }
    let steps = [
        (1usize, spacing[0]),
        (nx, spacing[1]),
        (nx * ny, spacing[2]),
    ];
    while let Some(Entry { cost, index }) = heap.pop() {
        if cost > dist[index] {
            continue;
        }
        let x = index % nx;
        let y = (index / nx) % ny;
        let z = index / (nx * ny);
        let coord = [x, y, z];
        for (axis, &(stride, mm)) in steps.iter().enumerate() {
            let spatial = (1.0 - lambda) * mm;
            if coord[axis] > 0 {
                relax(index, index - stride, spatial, lambda, intensity, cost, &mut dist, &mut heap);
            }
            if coord[axis] + 1 < dims[axis] {
                relax(index, index + stride, spatial, lambda, intensity, cost, &mut dist, &mut heap);
            }
        }
    }
    Ok(dist)
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn relax(
    from: usize,
    to: usize,
    spatial: f64,
    lambda: f64,
    intensity: &[f32],
    cost: f64,
    dist: &mut [f64],
    heap: &mut BinaryHeap<Entry>,
) {
    let w = spatial + lambda * (intensity[from] as f64 - intensity[to] as f64).abs();
    let c = cost + w;
    if c < dist[to] {
        dist[to] = c;
        heap.push(Entry { cost: c, index: to });
    }
}

/// EGD map of a normalised ROI image seeded at the clicks (ROI voxel indices).
pub fn egd_map(
    roi_intensity: &[f32],
    dims: [usize; 3],
    spacing: Vec3,
    seeds: &[[usize; 3]],
    params: EgdParams,
) -> Result<EgdMap> {
    if params.connectivity != 6 {
        return Err(Error::InvalidArgument(format!(
            "only 6-connectivity is supported, got {}",
            params.connectivity
        )));
    }
    if !(0.0..=1.0).contains(&params.lambda) || !(params.nu > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= lambda <= 1 and nu > 0, got {params:?}"
        )));
    }
    let distance = geodesic_distance(roi_intensity, dims, spacing, seeds, params.lambda)?;
    Ok(EgdMap {
        dims,
        params,
        distance,
    })
}
