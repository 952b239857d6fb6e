//! Connected-component labelling and hole filling on binary grids.

use std::collections::VecDeque;

use crate::volume::Mask3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Face6,
    Full26,
}

impl Connectivity {
    fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let n = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Face6 => n == 1,
                        Connectivity::Full26 => n > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Component labelling of voxels where `fg[i] == target`.
///
/// Returns per-voxel labels (0 = not part of any component, components are
/// numbered from 1 in scan order of their first voxel) and component sizes
/// indexed by `label - 1`.
pub fn label_components(
    fg: &[u8],
    dims: [usize; 3],
    conn: Connectivity,
    target: u8,
) -> (Vec<u32>, Vec<usize>) {
    let [nx, ny, nz] = dims;
    let offsets = conn.offsets();
    let mut labels = vec![0u32; fg.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if fg[start] != target || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let x = (i % nx) as i64;
            let y = ((i / nx) % ny) as i64;
            let z = (i / (nx * ny)) as i64;
            for o in &offsets {
                let (qx, qy, qz) = (x + o[0], y + o[1], z + o[2]);
                if qx < 0 || qy < 0 || qz < 0 || qx >= nx as i64 || qy >= ny as i64 || qz >= nz as i64 {
                    continue;
                }
                let j = qx as usize + nx * (qy as usize + ny * qz as usize);
                if fg[j] == target && labels[j] == 0 {
                    labels[j] = id;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

pub fn count_components(mask: &Mask3D, conn: Connectivity) -> usize {
    label_components(mask.labels(), mask.dims(), conn, 1).1.len()
}

/// Keeps the largest 26-connected foreground component; ties go to the
/// component met first in scan order.
pub fn largest_component(mask: &Mask3D) -> Mask3D {
    let (labels, sizes) = label_components(mask.labels(), mask.dims(), Connectivity::Full26, 1);
    if sizes.len() <= 1 {
        return mask.clone();
    }
    let mut best = 0;
    for (i, &s) in sizes.iter().enumerate() {
        if s > sizes[best] {
            best = i;
        }
    }
    let keep = best as u32 + 1;
    let out = labels.iter().map(|&l| (l == keep) as u8).collect();
    Mask3D::new(mask.geometry().clone(), out).expect("labels are binary")
}

/// Fills every 6-connected background component that does not touch the array border.
pub fn fill_holes(mask: &Mask3D) -> Mask3D {
    let dims = mask.dims();
    let (labels, sizes) = label_components(mask.labels(), dims, Connectivity::Face6, 0);
    let mut touches = vec![false; sizes.len()];
    let g = mask.geometry();
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let [x, y, z] = g.coords(i);
        if x == 0 || y == 0 || z == 0 || x + 1 == dims[0] || y + 1 == dims[1] || z + 1 == dims[2] {
            touches[l as usize - 1] = true;
        }
    }
    let out = mask
        .labels()
        .iter()
        .zip(&labels)
        .map(|(&m, &l)| (m != 0 || (l != 0 && !touches[l as usize - 1])) as u8)
        .collect();
    Mask3D::new(g.clone(), out).expect("labels are binary")
}
