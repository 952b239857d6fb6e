//! Deterministic synthetic tumour phantoms.
//!
//! A phantom is a union of 1–3 overlapping ellipsoids defined in millimetre
//! space, optionally accompanied by a distractor object of identical
//! contrast. The image is `background + contrast · indicator`, Gaussian
//! blurred, then corrupted with i.i.d. Gaussian noise.
//!
//! Randomness comes from `Pcg64` (PCG XSL-RR 128/64) seeded with the config
//! seed; output is reproducible within a build.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::gaussian_blur;
use crate::par;
use crate::volume::{Geometry, Mask3D, Modality, Vec3, Volume3D};

const MARGIN_VOX: f64 = 2.0;
const DISTRACTOR_GAP_VOX: f64 = 5.0;
const PLACEMENT_TRIES: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: Vec3,
    pub n_ellipsoids: usize,
    /// Semi-axis range in mm for the main ellipsoid.
    pub radius_mm: [f64; 2],
    pub background: f32,
    pub contrast: f32,
    pub noise_sigma: f32,
    pub blur_sigma_vox: f64,
    pub distractor: bool,
    /// Semi-axis range in mm for the distractor.
    pub distractor_radius_mm: [f64; 2],
    pub modality: Modality,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [48, 48, 24],
            spacing: [1.0, 1.0, 4.0],
            n_ellipsoids: 2,
            radius_mm: [10.0, 14.0],
            background: 100.0,
            contrast: 60.0,
            noise_sigma: 10.0,
            blur_sigma_vox: 0.7,
            distractor: false,
            distractor_radius_mm: [8.0, 12.0],
            modality: Modality::Synth,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        Geometry::simple(self.dims, self.spacing)?;
        if !(1..=3).contains(&self.n_ellipsoids) {
            return Err(Error::InvalidArgument(format!(
                "n_ellipsoids must be in 1..=3, got {}",
                self.n_ellipsoids
            )));
        }
        if self.contrast == 0.0 || !self.contrast.is_finite() {
            return Err(Error::InvalidArgument("contrast must be non-zero".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.blur_sigma_vox >= 0.0) {
            return Err(Error::InvalidArgument("noise and blur sigmas must be >= 0".into()));
        }
        for r in [self.radius_mm, self.distractor_radius_mm] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return Err(Error::InvalidArgument(format!("bad radius range {r:?}")));
            }
        }
        // Lobes may reach 1.2 main radii from the centre.
        let reach = self.radius_mm[1] * if self.n_ellipsoids > 1 { 1.2 } else { 1.0 };
        for a in 0..3 {
            let need = 2.0 * (reach / self.spacing[a] + MARGIN_VOX);
            if need > (self.dims[a] - 1) as f64 {
                return Err(Error::InvalidArgument(format!(
                    "ellipsoid radius {:.1} mm does not fit axis {a} ({} voxels at {} mm) with a {MARGIN_VOX}-voxel margin",
                    reach, self.dims[a], self.spacing[a]
                )));
            }
        }
        Ok(())
    }
}

/// An ellipsoid in mm space, rotated about the z axis.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Ellipsoid {
    center: Vec3,
    radii: Vec3,
    angle: f64,
}

impl Ellipsoid {
    fn contains(&self, p: Vec3) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let (s, c) = self.angle.sin_cos();
        let u = c * d[0] + s * d[1];
        let v = -s * d[0] + c * d[1];
        (u / self.radii[0]).powi(2) + (v / self.radii[1]).powi(2) + (d[2] / self.radii[2]).powi(2) <= 1.0
    }

    fn rasterize(parts: &[Ellipsoid], g: &Geometry) -> Mask3D {
        let sp = g.spacing;
        Mask3D::from_fn(g.clone(), |x, y, z| {
            let p = [x as f64 * sp[0], y as f64 * sp[1], z as f64 * sp[2]];
            parts.iter().any(|e| e.contains(p))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub image: Volume3D,
    pub mask: Mask3D,
    pub distractor: Option<Mask3D>,
    pub seed: u64,
}

fn sample_radii(rng: &mut Pcg64, range: [f64; 2]) -> Vec3 {
    let mut r = [0.0; 3];
    for v in &mut r {
        *v = if range[1] > range[0] {
            rng.random_range(range[0]..=range[1])
        } else {
            range[0]
        };
    }
    r
}

fn sample_center(rng: &mut Pcg64, cfg: &PhantomConfig, reach_mm: f64) -> Option<Vec3> {
    let mut c = [0.0; 3];
    for a in 0..3 {
        let lo = reach_mm / cfg.spacing[a] + MARGIN_VOX;
        let hi = (cfg.dims[a] - 1) as f64 - lo;
        if hi < lo {
            return None;
        }
        c[a] = rng.random_range(lo..=hi) * cfg.spacing[a];
    }
    Some(c)
}

pub fn generate_phantom(cfg: &PhantomConfig) -> Result<PhantomCase> {
    cfg.validate()?;
    let geometry = Geometry::simple(cfg.dims, cfg.spacing)?;
    let mut rng = Pcg64::seed_from_u64(cfg.seed);

    let reach = cfg.radius_mm[1] * if cfg.n_ellipsoids > 1 { 1.2 } else { 1.0 };
    let main = Ellipsoid {
        center: sample_center(&mut rng, cfg, reach).expect("validated"),
        radii: sample_radii(&mut rng, cfg.radius_mm),
        angle: rng.random_range(0.0..std::f64::consts::PI),
    };
    let mut parts = vec![main];
    for _ in 1..cfg.n_ellipsoids {
        // Lobe centre within half the main radii, so the union stays connected.
        let (s, c) = main.angle.sin_cos();
        let f = rng.random_range(0.3..0.5);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let theta = rng.random_range(-0.5..0.5f64);
        let local = [
            f * main.radii[0] * phi.cos() * theta.cos(),
            f * main.radii[1] * phi.sin() * theta.cos(),
            f * main.radii[2] * theta.sin(),
        ];
        let center = [
            main.center[0] + c * local[0] - s * local[1],
            main.center[1] + s * local[0] + c * local[1],
            main.center[2] + local[2],
        ];
        let scale = rng.random_range(0.5..0.7);
        parts.push(Ellipsoid {
            center,
            radii: [main.radii[0] * scale, main.radii[1] * scale, main.radii[2] * scale],
            angle: rng.random_range(0.0..std::f64::consts::PI),
        });
    }
    let mask = Ellipsoid::rasterize(&parts, &geometry);

    let distractor = if cfg.distractor {
        Some(place_distractor(&mut rng, cfg, &geometry, &mask)?)
    } else {
        None
    };

    let mut data = vec![cfg.background; geometry.len()];
    for (i, v) in data.iter_mut().enumerate() {
        let inside = mask.labels()[i] != 0 || distractor.as_ref().is_some_and(|d| d.labels()[i] != 0);
        if inside {
            *v += cfg.contrast;
        }
    }
    if cfg.blur_sigma_vox > 0.0 {
        gaussian_blur(&mut data, cfg.dims, [cfg.blur_sigma_vox; 3]);
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, cfg.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in &mut data {
            *v += normal.sample(&mut rng);
        }
    }
    let image = Volume3D::new(geometry, data, cfg.modality)?;
    Ok(PhantomCase {
        image,
        mask,
        distractor,
        seed: cfg.seed,
    })
}

fn place_distractor(rng: &mut Pcg64, cfg: &PhantomConfig, g: &Geometry, tumor: &Mask3D) -> Result<Mask3D> {
    let forbidden = dilate_ball(tumor, DISTRACTOR_GAP_VOX);
    for _ in 0..PLACEMENT_TRIES {
        let radii = sample_radii(rng, cfg.distractor_radius_mm);
        let reach = radii.iter().cloned().fold(0.0, f64::max);
        let Some(center) = sample_center(rng, cfg, reach) else {
            break;
        };
        let e = Ellipsoid {
            center,
            radii,
            angle: rng.random_range(0.0..std::f64::consts::PI),
        };
        let m = Ellipsoid::rasterize(&[e], g);
        if m.is_empty() {
            continue;
        }
        if m.labels().iter().zip(&forbidden).all(|(&a, &b)| !(a != 0 && b)) {
            return Ok(m);
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not place a distractor {DISTRACTOR_GAP_VOX} voxels away from the tumour in {:?}",
        cfg.dims
    )))
}

/// Voxels within Euclidean voxel distance `< radius` of the mask.
fn dilate_ball(m: &Mask3D, radius: f64) -> Vec<bool> {
    let g = m.geometry();
    let [nx, ny, nz] = g.dims;
    let r = radius.ceil() as i64;
    let mut offsets = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if ((dx * dx + dy * dy + dz * dz) as f64) < radius * radius {
                    offsets.push([dx, dy, dz]);
                }
            }
        }
    }
    let mut out = vec![false; g.len()];
    for [x, y, z] in m.foreground() {
        for o in &offsets {
            let (qx, qy, qz) = (x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]);
            if qx >= 0 && qy >= 0 && qz >= 0 && qx < nx as i64 && qy < ny as i64 && qz < nz as i64 {
                out[g.index(qx as usize, qy as usize, qz as usize)] = true;
            }
        }
    }
    out
}

/// Cases `seed, seed+1, …, seed+n-1` from one template.
pub fn generate_dataset(n: usize, template: &PhantomConfig, seed: u64) -> Result<Vec<PhantomCase>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
    }
    template.validate()?;
    par::map_range(n, |i| {
        let cfg = PhantomConfig {
            seed: seed.wrapping_add(i as u64),
            ..template.clone()
        };
        generate_phantom(&cfg)
    })
    .into_iter()
    .collect()
}

/// Dataset manifest: case file paths relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub cases: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractor: Option<PathBuf>,
    pub seed: u64,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_slice(&bytes)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for c in &mut m.cases {
            c.image = base.join(&c.image);
            c.mask = base.join(&c.mask);
            c.distractor = c.distractor.as_ref().map(|d| base.join(d));
        }
        Ok(m)
    }
}
