//! Ensemble prediction with eight-flip test-time augmentation.
//!
//! For every model and every axis-flip combination the input is flipped,
//! run forward, soft-maxed and flipped back; the tumour probabilities are
//! averaged over all `8·k` passes in a fixed order. Voxels with mean
//! probability strictly above 0.5 are tumour (ties go to background).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::io::{load_weights, save_weights};
use crate::nn::loss::softmax;
use crate::nn::{flip_combinations, Tensor, UNet};
use crate::par;
use crate::planner::PipelinePlan;
use crate::preprocess::PreprocessedCase;
use crate::volume::{mvol::atomic_write, Mask3D};

pub const ENSEMBLE_FILE: &str = "ensemble.json";
pub const DEFAULT_AUTOMATIC_BUDGET: [usize; 3] = [32, 32, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Image + EGD channels on the click ROI.
    #[default]
    Interactive,
    /// Image-only whole-volume baseline.
    Automatic,
}

impl Mode {
    pub fn in_channels(self) -> usize {
        match self {
            Mode::Interactive => 2,
            Mode::Automatic => 1,
        }
    }
}

/// Mean tumour probability over flips × models, on the input grid.
pub fn predict_proba(input: &Tensor<f32>, models: &[UNet<f32>]) -> Result<Vec<f32>> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    for m in models {
        m.spec.check_input(input.channels, input.dims)?;
    }
    let flips = flip_combinations();
    let passes = par::map_range(models.len() * flips.len(), |i| -> Result<Vec<f32>> {
        let (m, f) = (&models[i / flips.len()], flips[i % flips.len()]);
        let out = m.forward(&input.flip(f))?;
        let p = softmax(&out[0]);
        let p1 = Tensor::from_data(1, p.dims, p.channel(1).to_vec())?;
        Ok(p1.flip(f).data)
    });
    let mut sum = vec![0f64; input.voxels()];
    for p in passes {
        for (s, v) in sum.iter_mut().zip(p?) {
            *s += v as f64;
        }
    }
    let n = (models.len() * flips.len()) as f64;
    Ok(sum.into_iter().map(|s| (s / n) as f32).collect())
}

/// Thresholds a probability map; exactly 0.5 is background.
pub fn threshold(probs: &[f32]) -> Vec<u8> {
    probs.iter().map(|&p| (p > 0.5) as u8).collect()
}

/// Binary prediction on the case's ROI grid.
pub fn predict(case: &PreprocessedCase, models: &[UNet<f32>]) -> Result<Mask3D> {
    let input = Tensor::from_channels(case.image.dims(), &case.channels())?;
    let p = predict_proba(&input, models)?;
    Mask3D::new(case.image.geometry().clone(), threshold(&p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub mode: Mode,
    /// Whole-volume grid bound (automatic mode).
    pub budget: [usize; 3],
    pub plan: PipelinePlan,
    /// Weight files relative to the manifest.
    pub folds: Vec<String>,
}

/// Fold models plus the plan they were trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub mode: Mode,
    pub budget: [usize; 3],
    pub plan: PipelinePlan,
    pub models: Vec<UNet<f32>>,
    pub seeds: Vec<u64>,
    pub epochs: Vec<usize>,
}

impl Ensemble {
    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if self.models.is_empty() {
            return Err(Error::InvalidArgument("ensemble has no models".into()));
        }
        for m in &self.models {
            if m.spec.in_channels != self.mode.in_channels() || m.spec.divisors() != self.plan.divisors {
                return Err(Error::InvalidArgument(format!(
                    "model spec (in {}, divisors {:?}) does not match {:?} mode with plan divisors {:?}",
                    m.spec.in_channels,
                    m.spec.divisors(),
                    self.mode,
                    self.plan.divisors
                )));
            }
        }
        Ok(())
    }

    /// Writes `fold_{k}.weights` and `ensemble.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut folds = Vec::new();
        for (k, m) in self.models.iter().enumerate() {
            let name = format!("fold_{k}.weights");
            let seed = self.seeds.get(k).copied().unwrap_or(0);
            let epoch = self.epochs.get(k).copied().unwrap_or(0);
            save_weights(&dir.join(&name), m, seed, epoch)?;
            folds.push(name);
        }
        let manifest = EnsembleManifest {
            mode: self.mode,
            budget: self.budget,
            plan: self.plan.clone(),
            folds,
        };
        atomic_write(&dir.join(ENSEMBLE_FILE), &serde_json::to_vec_pretty(&manifest)?)
    }

    /// Loads from a models directory (or its `ensemble.json`).
    pub fn load(path: &Path) -> Result<Self> {
        let file: PathBuf = if path.is_dir() {
            path.join(ENSEMBLE_FILE)
        } else {
            path.to_path_buf()
        };
        let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
        let manifest: EnsembleManifest = serde_json::from_slice(&bytes)?;
        let base = file.parent().unwrap_or(Path::new("."));
        let mut e = Ensemble {
            mode: manifest.mode,
            budget: manifest.budget,
            plan: manifest.plan,
            models: Vec::new(),
            seeds: Vec::new(),
            epochs: Vec::new(),
        };
        for f in &manifest.folds {
            let (m, h) = load_weights(&base.join(f))?;
            e.models.push(m);
            e.seeds.push(h.seed);
            e.epochs.push(h.epoch);
        }
        e.validate()?;
        Ok(e)
    }
}
