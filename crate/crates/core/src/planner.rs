//! Dataset fingerprinting and rule-based pipeline parameters.
//!
//! Rules:
//! * target spacing is the per-axis median; when `max/min > 3` the coarsest
//!   axis takes the 10th percentile of its spacings instead;
//! * kernels are 3×3×3, except that the first two levels use size 1 on the
//!   coarsest axis when the target spacing ratio exceeds 2;
//! * at each level an axis is strided by 2 iff its current extent is ≥ 8 and
//!   its current spacing is ≤ 2× the smallest current spacing; 3–5 levels;
//! * CT: clip to the 0.5/99.5 percentiles of pooled foreground, then z-score
//!   with the pooled foreground mean/sd. Other modalities: per-image z-score.
//!
//! Percentiles interpolate linearly between closest ranks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interactions::EgdParams;
use crate::postproc::PostprocChoice;
use crate::volume::mvol::atomic_write;
use crate::volume::{spacing_ratio, Mask3D, Modality, Vec3, Volume3D};

pub const FOREGROUND_SAMPLE_CAP: usize = 100_000;
pub const BASE_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub spacings: Vec<Vec3>,
    pub dims: Vec<[usize; 3]>,
    pub foreground_sample: Vec<f32>,
    pub modality: Modality,
}

pub fn fingerprint_dataset(cases: &[(Volume3D, Mask3D)]) -> Result<DatasetFingerprint> {
    let Some((first, _)) = cases.first() else {
        return Err(Error::InvalidArgument("cannot fingerprint an empty dataset".into()));
    };
    let modality = first.modality();
    let mut pooled = Vec::new();
    for (i, (img, mask)) in cases.iter().enumerate() {
        if img.modality() != modality {
            return Err(Error::InvalidArgument(format!(
                "case {i} has modality {:?}, dataset is {modality:?}",
                img.modality()
            )));
        }
        if !img.geometry().same_grid(mask.geometry()) {
            return Err(Error::Geometry(format!("case {i}: image and mask grids differ")));
        }
        if modality.is_ct() && mask.is_empty() {
            return Err(Error::InvalidArgument(format!("CT case {i} has an empty mask")));
        }
        pooled.extend(
            img.data()
                .iter()
                .zip(mask.labels())
                .filter(|(_, &l)| l != 0)
                .map(|(&v, _)| v),
        );
    }
    Ok(DatasetFingerprint {
        spacings: cases.iter().map(|(v, _)| v.geometry().spacing).collect(),
        dims: cases.iter().map(|(v, _)| v.dims()).collect(),
        foreground_sample: subsample(pooled, FOREGROUND_SAMPLE_CAP),
        modality,
    })
}

/// Evenly strided subsample of at most `cap` values.
fn subsample(values: Vec<f32>, cap: usize) -> Vec<f32> {
    let n = values.len();
    if n <= cap {
        return values;
    }
    (0..cap).map(|i| values[i * n / cap]).collect()
}

/// Linear-interpolation percentile (`p` in [0, 100]) of unsorted data.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty data");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Normalization {
    Ct {
        clip_lo: f64,
        clip_hi: f64,
        mean: f64,
        sd: f64,
    },
    PerImageZscore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub modality: Modality,
    pub target_spacing: Vec3,
    pub anisotropic: bool,
    pub normalization: Normalization,
    /// Kernel shape per resolution level.
    pub kernel_schedule: Vec<[usize; 3]>,
    /// Stride per level; level 0 is always `[1, 1, 1]`.
    pub stride_schedule: Vec<[usize; 3]>,
    pub divisors: [usize; 3],
    pub base_features: usize,
    pub egd: EgdParams,
    #[serde(default)]
    pub postproc: PostprocChoice,
}

impl PipelinePlan {
    pub fn levels(&self) -> usize {
        self.stride_schedule.len()
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let plan: PipelinePlan = serde_json::from_slice(&bytes)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if !(1..=5).contains(&levels) || self.kernel_schedule.len() != levels {
            return Err(Error::InvalidArgument(format!(
                "plan has {levels} stride levels and {} kernel levels",
                self.kernel_schedule.len()
            )));
        }
        if self.stride_schedule[0] != [1, 1, 1] {
            return Err(Error::InvalidArgument("level 0 must not be strided".into()));
        }
        for (k, s) in self.kernel_schedule.iter().zip(&self.stride_schedule) {
            if k.iter().any(|&v| v != 1 && v != 3) || s.iter().any(|&v| v != 1 && v != 2) {
                return Err(Error::InvalidArgument(format!("bad kernel {k:?} or stride {s:?}")));
            }
        }
        if self.divisors != stride_products(&self.stride_schedule) {
            return Err(Error::InvalidArgument("divisors disagree with stride schedule".into()));
        }
        if self.base_features == 0 {
            return Err(Error::InvalidArgument("base_features must be positive".into()));
        }
        Ok(())
    }
}

pub fn stride_products(strides: &[[usize; 3]]) -> [usize; 3] {
    std::array::from_fn(|a| strides.iter().map(|s| s[a]).product())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub anisotropy_threshold: f64,
    pub pseudo3d_threshold: f64,
    pub min_levels: usize,
    pub max_levels: usize,
    pub min_extent: usize,
    pub ct_percentiles: [f64; 2],
    pub egd: EgdParams,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            anisotropy_threshold: 3.0,
            pseudo3d_threshold: 2.0,
            min_levels: 3,
            max_levels: 5,
            min_extent: 8,
            ct_percentiles: [0.5, 99.5],
            egd: EgdParams::default(),
        }
    }
}

pub fn derive_plan(fp: &DatasetFingerprint) -> Result<PipelinePlan> {
    derive_plan_with(fp, &PlanOptions::default())
}

pub fn derive_plan_with(fp: &DatasetFingerprint, opts: &PlanOptions) -> Result<PipelinePlan> {
    if fp.spacings.is_empty() || fp.spacings.len() != fp.dims.len() {
        return Err(Error::InvalidArgument("fingerprint needs >= 1 case with dims and spacing".into()));
    }
    if fp.modality.is_ct() && fp.foreground_sample.is_empty() {
        return Err(Error::InvalidArgument("CT fingerprint has no foreground sample".into()));
    }
    if !(1..=5).contains(&opts.min_levels) || opts.max_levels < opts.min_levels || opts.max_levels > 5 {
        return Err(Error::InvalidArgument(format!(
            "level bounds {}..={} must lie within 1..=5",
            opts.min_levels, opts.max_levels
        )));
    }

    let axis_values = |a: usize| fp.spacings.iter().map(|s| s[a]).collect::<Vec<_>>();
    let mut target: Vec3 = std::array::from_fn(|a| percentile(&axis_values(a), 50.0));
    let anisotropic = spacing_ratio(&target) > opts.anisotropy_threshold;
    if anisotropic {
        let coarse = argmax(&target);
        target[coarse] = percentile(&axis_values(coarse), 10.0);
    }

    let pseudo3d = spacing_ratio(&target) > opts.pseudo3d_threshold;
    let coarse = argmax(&target);

    // median extent after resampling
    let mut extent: [f64; 3] = std::array::from_fn(|a| {
        let e: Vec<f64> = fp
            .dims
            .iter()
            .zip(&fp.spacings)
            .map(|(d, s)| (d[a] as f64 * s[a] / target[a]).round())
            .collect();
        percentile(&e, 50.0)
    });
    let mut spacing = target;
    let mut strides = vec![[1usize; 3]];
    while strides.len() < opts.max_levels {
        let min_sp = spacing.iter().cloned().fold(f64::INFINITY, f64::min);
        let pick = |min_extent: f64| -> [usize; 3] {
            std::array::from_fn(|a| {
                if extent[a] >= min_extent && spacing[a] <= 2.0 * min_sp + 1e-12 {
                    2
                } else {
                    1
                }
            })
        };
        let mut s = pick(opts.min_extent as f64);
        if s == [1, 1, 1] {
            if strides.len() >= opts.min_levels {
                break;
            }
            s = pick(2.0);
        }
        for a in 0..3 {
            if s[a] == 2 {
                extent[a] = (extent[a] / 2.0).floor();
                spacing[a] *= 2.0;
            }
        }
        strides.push(s);
    }

    let kernels = (0..strides.len())
        .map(|l| {
            let mut k = [3usize; 3];
            if pseudo3d && l < 2 {
                k[coarse] = 1;
            }
            k
        })
        .collect();

    let normalization = if fp.modality.is_ct() {
        let sample: Vec<f64> = fp.foreground_sample.iter().map(|&v| v as f64).collect();
        let n = sample.len() as f64;
        let mean = sample.iter().sum::<f64>() / n;
        let sd = (sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Normalization::Ct {
            clip_lo: percentile(&sample, opts.ct_percentiles[0]),
            clip_hi: percentile(&sample, opts.ct_percentiles[1]),
            mean,
            sd,
        }
    } else {
        Normalization::PerImageZscore
    };

    let plan = PipelinePlan {
        modality: fp.modality,
        target_spacing: target,
        anisotropic,
        normalization,
        divisors: stride_products(&strides),
        kernel_schedule: kernels,
        stride_schedule: strides,
        base_features: BASE_FEATURES,
        egd: opts.egd,
        postproc: PostprocChoice::None,
    };
    plan.validate()?;
    Ok(plan)
}

fn argmax(v: &Vec3) -> usize {
    (0..3).fold(0, |best, a| if v[a] > v[best] { a } else { best })
}
