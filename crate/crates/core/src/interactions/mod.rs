//! The six boundary clicks and everything derived from them.

mod egd;
mod roi;

pub use egd::{egd_map, geodesic_distance, EgdMap, EgdParams};
pub use roi::{roi_from_points, RoiBox, RELAXATION};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, Mask3D, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    World,
    Voxel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickPoint {
    pub space: Space,
    pub coords: Vec3,
    pub axis: Axis,
    pub side: Side,
}

/// Exactly six clicks: one min and one max per axis, all in one coordinate space.
///
/// Serialises as a bare JSON array of six `{space, coords, axis, side}` objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClickPoint>", into = "Vec<ClickPoint>")]
pub struct InteractionSet {
    points: Vec<ClickPoint>,
}

impl TryFrom<Vec<ClickPoint>> for InteractionSet {
    type Error = Error;

    fn try_from(points: Vec<ClickPoint>) -> Result<Self> {
        InteractionSet::new(points)
    }
}

impl From<InteractionSet> for Vec<ClickPoint> {
    fn from(s: InteractionSet) -> Self {
        s.points
    }
}

impl InteractionSet {
    pub fn new(mut points: Vec<ClickPoint>) -> Result<Self> {
        if points.len() != 6 {
            return Err(Error::Interactions(format!("expected 6 points, got {}", points.len())));
        }
        for axis in Axis::ALL {
            for side in [Side::Min, Side::Max] {
                let n = points.iter().filter(|p| p.axis == axis && p.side == side).count();
                if n != 1 {
                    return Err(Error::Interactions(format!(
                        "expected exactly one {side:?} point on axis {axis:?}, got {n}"
                    )));
                }
            }
        }
        if points.iter().any(|p| p.space != points[0].space) {
            return Err(Error::Interactions("points mix world and voxel space".into()));
        }
        if points.iter().any(|p| p.coords.iter().any(|c| !c.is_finite())) {
            return Err(Error::Interactions("non-finite coordinates".into()));
        }
        points.sort_by_key(|p| (p.axis.index(), p.side == Side::Max));
        Ok(InteractionSet { points })
    }

    /// Builds a voxel-space set from `[xmin, xmax, ymin, ymax, zmin, zmax]`.
    pub fn from_voxels(v: [[f64; 3]; 6]) -> Self {
        let points = v
            .iter()
            .enumerate()
            .map(|(i, &coords)| ClickPoint {
                space: Space::Voxel,
                coords,
                axis: Axis::ALL[i / 2],
                side: if i % 2 == 0 { Side::Min } else { Side::Max },
            })
            .collect();
        InteractionSet { points }
    }

    /// Points ordered x-min, x-max, y-min, y-max, z-min, z-max.
    pub fn points(&self) -> &[ClickPoint] {
        &self.points
    }

    pub fn space(&self) -> Space {
        self.points[0].space
    }

    pub fn coords(&self) -> [Vec3; 6] {
        std::array::from_fn(|i| self.points[i].coords)
    }

    /// Rounded voxel indices (voxel-space sets only).
    pub fn voxel_indices(&self) -> Result<[[i64; 3]; 6]> {
        if self.space() != Space::Voxel {
            return Err(Error::Interactions("expected voxel-space points".into()));
        }
        Ok(std::array::from_fn(|i| {
            let c = self.points[i].coords;
            [c[0].round() as i64, c[1].round() as i64, c[2].round() as i64]
        }))
    }

    pub fn map_coords(&self, space: Space, f: impl Fn(Vec3) -> Vec3) -> Self {
        InteractionSet {
            points: self
                .points
                .iter()
                .map(|p| ClickPoint {
                    space,
                    coords: f(p.coords),
                    ..*p
                })
                .collect(),
        }
    }

    /// World-space copy of a voxel-space set.
    pub fn to_world(&self, g: &Geometry) -> Result<Self> {
        if self.space() != Space::Voxel {
            return Err(Error::Interactions("expected voxel-space points".into()));
        }
        Ok(self.map_coords(Space::World, |c| g.world_from_continuous(c)))
    }
}

/// How far synthetic clicks move inwards from the extremes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InwardRule {
    pub in_plane: usize,
    pub out_of_plane: usize,
    /// Spacing ratio above which the coarsest axis counts as out-of-plane.
    pub anisotropy_threshold: f64,
}

impl Default for InwardRule {
    fn default() -> Self {
        InwardRule {
            in_plane: 5,
            out_of_plane: 1,
            anisotropy_threshold: 3.0,
        }
    }
}

impl InwardRule {
    /// Out-of-plane axis of an anisotropic grid, if any.
    pub fn out_of_plane_axis(&self, g: &Geometry) -> Option<usize> {
        if g.anisotropy_ratio() > self.anisotropy_threshold {
            let s = g.spacing;
            Some((0..3).fold(0, |best, a| if s[a] > s[best] { a } else { best }))
        } else {
            None
        }
    }

    fn step(&self, g: &Geometry, axis: usize) -> usize {
        if self.out_of_plane_axis(g) == Some(axis) {
            self.out_of_plane
        } else {
            self.in_plane
        }
    }
}

/// Simulates a user's clicks from a reference mask (voxel space of the mask grid).
pub fn synth_extreme_points(mask: &Mask3D) -> Result<InteractionSet> {
    synth_extreme_points_with(mask, &InwardRule::default())
}

pub fn synth_extreme_points_with(mask: &Mask3D, rule: &InwardRule) -> Result<InteractionSet> {
    let g = mask.geometry();
    let fg: Vec<[usize; 3]> = mask.foreground().collect();
    if fg.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut centroid = [0f64; 3];
    for p in &fg {
        for a in 0..3 {
            centroid[a] += p[a] as f64;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= fg.len() as f64);

    let mut out = [[0f64; 3]; 6];
    for axis in 0..3 {
        let lo = fg.iter().map(|p| p[axis]).min().expect("non-empty");
        let hi = fg.iter().map(|p| p[axis]).max().expect("non-empty");
        for (slot, extreme, dir) in [(2 * axis, lo, 1i64), (2 * axis + 1, hi, -1i64)] {
            let start = fg
                .iter()
                .filter(|p| p[axis] == extreme)
                .min_by(|a, b| {
                    let da = plane_dist2(a, &centroid, axis, &g.spacing);
                    let db = plane_dist2(b, &centroid, axis, &g.spacing);
                    da.total_cmp(&db).then_with(|| a.cmp(b))
                })
                .copied()
                .expect("extreme attained");
            let step = rule.step(g, axis) as i64;
            let mut p = start;
            for back in 0..=step {
                let c = extreme as i64 + dir * (step - back);
                if c < 0 || c >= g.dims[axis] as i64 {
                    continue;
                }
                let mut q = start;
                q[axis] = c as usize;
                if mask.get(q[0], q[1], q[2]) {
                    p = q;
                    break;
                }
            }
            out[slot] = [p[0] as f64, p[1] as f64, p[2] as f64];
        }
    }
    Ok(InteractionSet::from_voxels(out))
}

fn plane_dist2(p: &[usize; 3], c: &Vec3, axis: usize, sp: &Vec3) -> f64 {
    (0..3)
        .filter(|&a| a != axis)
        .map(|a| ((p[a] as f64 - c[a]) * sp[a]).powi(2))
        .sum()
}

/// Moves each click by up to `amount` voxels along in-plane axes, keeping it
/// inside the mask (the original position is kept if no draw lands inside).
pub fn jitter_points<R: Rng>(
    points: &InteractionSet,
    mask: &Mask3D,
    amount: usize,
    rule: &InwardRule,
    rng: &mut R,
) -> Result<InteractionSet> {
    let g = mask.geometry();
    let oop = rule.out_of_plane_axis(g);
    let idx = points.voxel_indices()?;
    let a = amount as i64;
    let mut out = [[0f64; 3]; 6];
    for (i, p) in idx.iter().enumerate() {
        let mut chosen = *p;
        if amount > 0 {
            for _ in 0..8 {
                let mut q = *p;
                for ax in 0..3 {
                    if Some(ax) != oop {
                        q[ax] += rng.random_range(-a..=a);
                    }
                }
                if g.contains(q) && mask.get(q[0] as usize, q[1] as usize, q[2] as usize) {
                    chosen = q;
                    break;
                }
            }
        }
        out[i] = [chosen[0] as f64, chosen[1] as f64, chosen[2] as f64];
    }
    Ok(InteractionSet::from_voxels(out))
}
