//! Training-time augmentation.
//!
//! Spatial transforms (in-plane rotation and zoom about the volume centre,
//! per-axis flips) move every input channel and the target together; the
//! target is sampled nearest-neighbour so it stays binary. Intensity
//! transforms touch channel 0 (the image) only.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::filter::gaussian_blur;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub p_rotate: f64,
    pub max_rotation_deg: f64,
    pub p_zoom: f64,
    pub zoom: [f64; 2],
    /// Per-axis flip probability.
    pub p_flip: f64,
    pub p_noise: f64,
    pub max_noise_sd: f64,
    pub p_blur: f64,
    pub blur_sigma: [f64; 2],
    pub p_scale: f64,
    pub scale: [f64; 2],
    pub p_contrast: f64,
    pub contrast: [f64; 2],
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            p_rotate: 0.2,
            max_rotation_deg: 15.0,
            p_zoom: 0.2,
            zoom: [0.8, 1.2],
            p_flip: 0.5,
            p_noise: 0.15,
            max_noise_sd: 0.1,
            p_blur: 0.2,
            blur_sigma: [0.5, 1.5],
            p_scale: 0.15,
            scale: [0.9, 1.1],
            p_contrast: 0.15,
            contrast: [0.75, 1.25],
        }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        AugmentParams {
            p_rotate: 0.0,
            p_zoom: 0.0,
            p_flip: 0.0,
            p_noise: 0.0,
            p_blur: 0.0,
            p_scale: 0.0,
            p_contrast: 0.0,
            ..Self::default()
        }
    }
}

pub fn flip_labels(t: &[u8], dims: [usize; 3], axes: [bool; 3]) -> Vec<u8> {
    let [nx, ny, nz] = dims;
    let mut out = Vec::with_capacity(t.len());
    for z in 0..nz {
        let sz = if axes[2] { nz - 1 - z } else { z };
        for y in 0..ny {
            let sy = if axes[1] { ny - 1 - y } else { y };
            for x in 0..nx {
                let sx = if axes[0] { nx - 1 - x } else { x };
                out.push(t[sx + nx * (sy + ny * sz)]);
            }
        }
    }
    out
}

/// Flips input and target along the same axes.
pub fn flip_sample(input: &Tensor<f32>, target: &[u8], axes: [bool; 3]) -> (Tensor<f32>, Vec<u8>) {
    (input.flip(axes), flip_labels(target, input.dims, axes))
}

/// In-plane rotation by `angle` radians and zoom by `zoom` about the centre.
/// Channels use bilinear sampling, the target nearest neighbour; borders clamp.
pub fn rotate_zoom(input: &Tensor<f32>, target: &[u8], angle: f64, zoom: f64) -> (Tensor<f32>, Vec<u8>) {
    let [nx, ny, nz] = input.dims;
    let (cx, cy) = ((nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0);
    let (s, c) = angle.sin_cos();
    let nv = input.voxels();
    let mut out = Tensor::zeros(input.channels, input.dims);
    let mut tout = vec![0u8; target.len()];
    for y in 0..ny {
        for x in 0..nx {
            let (dx, dy) = ((x as f64 - cx) / zoom, (y as f64 - cy) / zoom);
            let sx = (c * dx + s * dy + cx).clamp(0.0, nx as f64 - 1.0);
            let sy = (-s * dx + c * dy + cy).clamp(0.0, ny as f64 - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(nx - 1), (y0 + 1).min(ny - 1));
            let (tx, ty) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            let (rx, ry) = (sx.round() as usize, sy.round() as usize);
            for z in 0..nz {
                let plane = nx * ny * z;
                let d = plane + x + nx * y;
                tout[d] = target[plane + rx + nx * ry];
                for ch in 0..input.channels {
                    let src = &input.data[ch * nv..(ch + 1) * nv];
                    let at = |xx: usize, yy: usize| src[plane + xx + nx * yy];
                    let top = at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx;
                    let bot = at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx;
                    out.data[ch * nv + d] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
    }
    (out, tout)
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Applies each transform with its probability.
pub fn augment<R: Rng>(input: &Tensor<f32>, target: &[u8], rng: &mut R, p: &AugmentParams) -> (Tensor<f32>, Vec<u8>) {
    let mut x = input.clone();
    let mut t = target.to_vec();
    let rotate = rng.random_bool(p.p_rotate.clamp(0.0, 1.0));
    let zoom = rng.random_bool(p.p_zoom.clamp(0.0, 1.0));
    if rotate || zoom {
        let angle = if rotate {
            let m = p.max_rotation_deg.to_radians();
            uniform(rng, [-m, m])
        } else {
            0.0
        };
        let z = if zoom { uniform(rng, p.zoom) } else { 1.0 };
        (x, t) = rotate_zoom(&x, &t, angle, z);
    }
    let axes: [bool; 3] = std::array::from_fn(|_| rng.random_bool(p.p_flip.clamp(0.0, 1.0)));
    if axes.iter().any(|&a| a) {
        (x, t) = flip_sample(&x, &t, axes);
    }
    let dims = x.dims;
    let img = x.channel_mut(0);
    if rng.random_bool(p.p_noise.clamp(0.0, 1.0)) {
        let sd = uniform(rng, [0.0, p.max_noise_sd]);
        if sd > 0.0 {
            let n = Normal::new(0.0, sd).expect("positive sd");
            img.iter_mut().for_each(|v| *v += n.sample(rng) as f32);
        }
    }
    if rng.random_bool(p.p_blur.clamp(0.0, 1.0)) {
        let s = uniform(rng, p.blur_sigma);
        gaussian_blur(img, dims, [s, s, 0.0]);
    }
    if rng.random_bool(p.p_scale.clamp(0.0, 1.0)) {
        let s = uniform(rng, p.scale) as f32;
        img.iter_mut().for_each(|v| *v *= s);
    }
    if rng.random_bool(p.p_contrast.clamp(0.0, 1.0)) {
        let c = uniform(rng, p.contrast) as f32;
        let mean = img.iter().sum::<f32>() / img.len() as f32;
        img.iter_mut().for_each(|v| *v = (*v - mean) * c + mean);
    }
    (x, t)
}
